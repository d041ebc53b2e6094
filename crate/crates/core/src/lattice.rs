//! Finite lattice geometries: boxes in ℤᵈ with an absorbing complement, and
//! discrete tori (ℤ/2L̄ℤ)ᵈ identified with (ℤ∩[−L̄,L̄))ᵈ.
//!
//! All other modules address vertices through the linear index of a
//! [`Geometry`]; indexing is row-major over coordinates. The ℓ∞ metric is used
//! throughout, with per-axis wrapping on tori.

use crate::{Error, Result};
use serde::{Deserialize, Serialize};

/// Boundary behavior of a finite vertex set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    /// Sites of the ℓ∞ ball B(0, radius) in ℤᵈ. Every walk step leaving the
    /// box enters the absorbing complement and dies there.
    Box { radius: i64 },
    /// The torus (ℤ/2L̄ℤ)ᵈ with vertices identified with (ℤ∩[−L̄,L̄))ᵈ.
    Torus { half_side: i64 },
}

/// A finite vertex set with ℓ∞ metric, neighbor structure, and a linear
/// vertex ↔ index bijection. Immutable after construction.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Geometry {
    dim: usize,
    mode: Mode,
    side: i64,
    /// Smallest coordinate value, so that `coord + offset ∈ [0, side)`.
    offset: i64,
    strides: Vec<usize>,
    len: usize,
}

impl Geometry {
    /// Box B(0, radius) in ℤᵈ, surrounded by an implicit absorbing halo.
    pub fn zd_box(dim: usize, radius: i64) -> Result<Self> {
        if dim < 2 {
            return Err(Error::config("dimension must be at least 2"));
        }
        if radius < 0 {
            return Err(Error::config("box radius must be non-negative"));
        }
        Ok(Self::build(dim, Mode::Box { radius }, 2 * radius + 1, -radius))
    }

    /// Discrete torus with side 2·half_side per axis.
    pub fn torus(dim: usize, half_side: i64) -> Result<Self> {
        if dim < 2 {
            return Err(Error::config("dimension must be at least 2"));
        }
        if half_side < 1 {
            return Err(Error::config("torus half-side must be at least 1"));
        }
        Ok(Self::build(
            dim,
            Mode::Torus { half_side },
            2 * half_side,
            -half_side,
        ))
    }

    fn build(dim: usize, mode: Mode, side: i64, offset: i64) -> Self {
        let mut strides = vec![0usize; dim];
        let mut acc = 1usize;
        for axis in (0..dim).rev() {
            strides[axis] = acc;
            acc *= side as usize;
        }
        Geometry {
            dim,
            mode,
            side,
            offset,
            strides,
            len: acc,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    /// Number of vertices.
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Side length per axis (2·radius+1 for boxes, 2·half_side for tori).
    pub fn side(&self) -> i64 {
        self.side
    }

    pub fn is_torus(&self) -> bool {
        matches!(self.mode, Mode::Torus { .. })
    }

    /// Linear index of a coordinate vector. Coordinates are wrapped on tori
    /// and must lie inside the box otherwise.
    pub fn index(&self, coord: &[i64]) -> usize {
        debug_assert_eq!(coord.len(), self.dim);
        let mut idx = 0usize;
        for (axis, &c) in coord.iter().enumerate() {
            let shifted = match self.mode {
                Mode::Torus { .. } => (c - self.offset).rem_euclid(self.side),
                Mode::Box { .. } => {
                    let s = c - self.offset;
                    debug_assert!((0..self.side).contains(&s), "coordinate outside box");
                    s
                }
            };
            idx += shifted as usize * self.strides[axis];
        }
        idx
    }

    /// Writes the coordinates of `idx` into `out`.
    pub fn coord_into(&self, idx: usize, out: &mut [i64]) {
        debug_assert_eq!(out.len(), self.dim);
        let mut rem = idx;
        for axis in 0..self.dim {
            out[axis] = (rem / self.strides[axis]) as i64 + self.offset;
            rem %= self.strides[axis];
        }
    }

    pub fn coord(&self, idx: usize) -> Vec<i64> {
        let mut out = vec![0i64; self.dim];
        self.coord_into(idx, &mut out);
        out
    }

    /// ℓ∞ distance between two vertices (wrapped per axis on tori).
    pub fn dist(&self, a: usize, b: usize) -> i64 {
        let mut ra = a;
        let mut rb = b;
        let mut best = 0i64;
        for axis in 0..self.dim {
            let ca = (ra / self.strides[axis]) as i64;
            let cb = (rb / self.strides[axis]) as i64;
            ra %= self.strides[axis];
            rb %= self.strides[axis];
            let d = self.axis_dist(ca - cb);
            best = best.max(d);
        }
        best
    }

    #[inline]
    fn axis_dist(&self, delta: i64) -> i64 {
        match self.mode {
            Mode::Box { .. } => delta.abs(),
            Mode::Torus { .. } => {
                let m = delta.rem_euclid(self.side);
                m.min(self.side - m)
            }
        }
    }

    /// Calls `f` with the linear index of every in-geometry neighbor of `idx`.
    /// On boxes, steps leaving the box are absorbed and not reported; the count
    /// of such steps is `2*dim - (number reported)`.
    #[inline]
    pub fn for_each_neighbor(&self, idx: usize, mut f: impl FnMut(usize)) {
        let mut rem = idx;
        for axis in 0..self.dim {
            let stride = self.strides[axis];
            let c = rem / stride;
            rem %= stride;
            let base = idx - c * stride;
            match self.mode {
                Mode::Torus { .. } => {
                    let up = if c + 1 == self.side as usize { 0 } else { c + 1 };
                    let down = if c == 0 { self.side as usize - 1 } else { c - 1 };
                    f(base + up * stride);
                    f(base + down * stride);
                }
                Mode::Box { .. } => {
                    if c + 1 < self.side as usize {
                        f(base + (c + 1) * stride);
                    }
                    if c > 0 {
                        f(base + (c - 1) * stride);
                    }
                }
            }
        }
    }

    /// Number of neighbors inside the vertex set.
    pub fn degree(&self, idx: usize) -> usize {
        let mut n = 0;
        self.for_each_neighbor(idx, |_| n += 1);
        n
    }

    /// ℓ∞ ball B(center, r) as a sorted list of linear indices.
    ///
    /// On tori the radius must satisfy 2r+1 ≤ side, otherwise the ball wraps
    /// onto itself and the request is rejected. On boxes the ball is clipped to
    /// the vertex set.
    pub fn ball(&self, center: usize, r: i64) -> Result<Vec<usize>> {
        self.ring(center, 0, r)
    }

    /// ℓ∞ sphere S(center, r); equals ball(r) \ ball(r−1) for r ≥ 1.
    pub fn sphere(&self, center: usize, r: i64) -> Result<Vec<usize>> {
        self.ring(center, r, r)
    }

    /// Sites with r_lo ≤ dist(·, center) ≤ r_hi.
    fn ring(&self, center: usize, r_lo: i64, r_hi: i64) -> Result<Vec<usize>> {
        if r_hi < 0 || r_lo < 0 {
            return Err(Error::config("radius must be non-negative"));
        }
        if self.is_torus() && 2 * r_hi + 1 > self.side {
            return Err(Error::config(format!(
                "radius {r_hi} wraps on a torus of side {}",
                self.side
            )));
        }
        let mut c = vec![0i64; self.dim];
        self.coord_into(center, &mut c);
        let mut out = Vec::new();
        let mut delta = vec![-r_hi; self.dim];
        let mut point = vec![0i64; self.dim];
        'odometer: loop {
            let linf = delta.iter().map(|d| d.abs()).max().unwrap_or(0);
            if linf >= r_lo {
                let mut in_range = true;
                for axis in 0..self.dim {
                    point[axis] = c[axis] + delta[axis];
                    if let Mode::Box { .. } = self.mode {
                        if point[axis] < self.offset || point[axis] >= self.offset + self.side {
                            in_range = false;
                            break;
                        }
                    }
                }
                if in_range {
                    out.push(self.index(&point));
                }
            }
            for axis in (0..self.dim).rev() {
                delta[axis] += 1;
                if delta[axis] <= r_hi {
                    continue 'odometer;
                }
                delta[axis] = -r_hi;
            }
            break;
        }
        out.sort_unstable();
        out.dedup();
        Ok(out)
    }
}

/// Renormalization grid of mesh L on a torus, with the shell map used to cover
/// annulus crossings at scale ℓL by crossings at scale L.
#[derive(Debug, Clone)]
pub struct GridShell {
    geometry: Geometry,
    mesh: i64,
    scale: i64,
    grid: Vec<usize>,
}

impl GridShell {
    /// Requires a torus whose half-side is a multiple of the mesh, and a scale
    /// factor ℓ ≥ 6 (below which the containment B(y,2L) ⊆ B(x,2ℓL) can fail).
    pub fn new(geometry: &Geometry, mesh: i64, scale: i64) -> Result<Self> {
        let Mode::Torus { half_side } = geometry.mode() else {
            return Err(Error::config("renormalization grid requires a torus"));
        };
        if mesh < 1 {
            return Err(Error::config("mesh must be at least 1"));
        }
        if scale < 6 {
            return Err(Error::config("scale factor must be at least 6"));
        }
        if half_side % mesh != 0 {
            return Err(Error::config(
                "torus half-side must be a multiple of the mesh",
            ));
        }
        if 4 * scale * mesh >= 2 * half_side {
            return Err(Error::config(
                "annulus of outer radius 2ℓL does not fit on the torus",
            ));
        }
        let mut grid = Vec::new();
        let d = geometry.dim();
        let mut coord = vec![-half_side; d];
        'odometer: loop {
            grid.push(geometry.index(&coord));
            for axis in (0..d).rev() {
                coord[axis] += mesh;
                if coord[axis] < half_side {
                    continue 'odometer;
                }
                coord[axis] = -half_side;
            }
            break;
        }
        grid.sort_unstable();
        Ok(GridShell {
            geometry: geometry.clone(),
            mesh,
            scale,
            grid,
        })
    }

    pub fn mesh(&self) -> i64 {
        self.mesh
    }

    pub fn scale(&self) -> i64 {
        self.scale
    }

    /// Grid points 𝔾_L (torus vertices with all coordinates in mesh·ℤ).
    pub fn grid(&self) -> &[usize] {
        &self.grid
    }

    /// Shell 𝕊_L(x): grid points y whose ball B(y,L) meets the sphere
    /// S(x, ⌊3ℓL/2⌋). Half-integer sphere radii round down.
    pub fn shell(&self, x: usize) -> Vec<usize> {
        let r = 3 * self.scale * self.mesh / 2;
        let d = self.geometry.dim();
        let side = self.geometry.side();
        let mut cx = vec![0i64; d];
        self.geometry.coord_into(x, &mut cx);
        let mut cy = vec![0i64; d];
        let mut out = Vec::new();
        for &y in &self.grid {
            self.geometry.coord_into(y, &mut cy);
            // B(y,L) ∩ S(x,r) ≠ ∅  ⟺  min and max of |·−x|∞ over B(y,L) bracket r.
            let mut dmin = 0i64;
            let mut dmax = 0i64;
            for axis in 0..d {
                let (lo, hi) = circ_interval_dist(side, cx[axis], cy[axis], self.mesh);
                dmin = dmin.max(lo);
                dmax = dmax.max(hi);
            }
            if dmin <= r && r <= dmax {
                out.push(y);
            }
        }
        out
    }

    /// The covering boxes {B(y,L) : y ∈ 𝕊_L(x)}. Any lattice path from
    /// B(x,ℓL) to S(x,2ℓL) meets at least one of them.
    pub fn renorm_cover(&self, x: usize) -> Result<Vec<Vec<usize>>> {
        self.shell(x)
            .iter()
            .map(|&y| self.geometry.ball(y, self.mesh))
            .collect()
    }
}

/// Min and max circular distance from point `p` to the wrapped interval
/// [c−w, c+w] on a cycle of length `side`.
fn circ_interval_dist(side: i64, p: i64, c: i64, w: i64) -> (i64, i64) {
    let half = side / 2;
    if 2 * w + 1 >= side {
        return (0, half);
    }
    let u = (p - c).rem_euclid(side);
    let dmin = if u <= w || u >= side - w {
        0
    } else {
        (u - w).min(side - u - w)
    };
    let circ = |raw: i64| -> i64 {
        let m = raw.rem_euclid(side);
        m.min(side - m)
    };
    // Farthest interval point from p: an endpoint, unless the interval
    // contains an antipode of p.
    let d_hi = circ(u - w).max(circ(u + w));
    let antipodal = circ(u - half) <= w || circ(u + half) <= w;
    let dmax = if antipodal { half } else { d_hi };
    (dmin, dmax)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ball_and_sphere_degenerate_radius() {
        let g = Geometry::zd_box(3, 4).unwrap();
        let c = g.index(&[0, 0, 0]);
        assert_eq!(g.ball(c, 0).unwrap(), vec![c]);
        assert_eq!(g.sphere(c, 0).unwrap(), vec![c]);
    }

    #[test]
    fn ball_and_sphere_counts_d3() {
        let g = Geometry::zd_box(3, 4).unwrap();
        let c = g.index(&[0, 0, 0]);
        assert_eq!(g.ball(c, 1).unwrap().len(), 27);
        assert_eq!(g.sphere(c, 1).unwrap().len(), 26);
    }

    #[test]
    fn torus_ball_by_exhaustive_distance_scan() {
        let g = Geometry::torus(3, 8).unwrap();
        let c = g.index(&[3, -2, 7]);
        let ball = g.ball(c, 2).unwrap();
        assert_eq!(ball.len(), 125);
        let scan: Vec<usize> = (0..g.len()).filter(|&v| g.dist(c, v) <= 2).collect();
        assert_eq!(ball, scan);
    }

    #[test]
    fn sphere_is_ball_difference() {
        let g = Geometry::torus(2, 6).unwrap();
        let c = g.index(&[1, -3]);
        for r in 1..5 {
            let ball_r = g.ball(c, r).unwrap();
            let ball_rm1 = g.ball(c, r - 1).unwrap();
            let sphere = g.sphere(c, r).unwrap();
            let mut union = sphere.clone();
            union.extend_from_slice(&ball_rm1);
            union.sort_unstable();
            assert_eq!(union, ball_r);
            assert!(sphere.iter().all(|v| !ball_rm1.contains(v)));
        }
    }

    #[test]
    fn torus_wrapping_radius_rejected() {
        let g = Geometry::torus(2, 4).unwrap();
        assert!(g.ball(0, 4).is_err());
        assert!(g.ball(0, 3).is_ok());
    }

    #[test]
    fn torus_distance_translation_invariant() {
        let g = Geometry::torus(2, 3).unwrap();
        let shift = |v: usize, z: &[i64]| -> usize {
            let mut c = g.coord(v);
            for (ci, zi) in c.iter_mut().zip(z) {
                *ci += zi;
            }
            g.index(&c)
        };
        for a in 0..g.len() {
            for b in 0..g.len() {
                for z in [[1, 0], [0, 5], [3, 4]] {
                    assert_eq!(g.dist(a, b), g.dist(shift(a, &z), shift(b, &z)));
                }
            }
        }
    }

    #[test]
    fn neighbor_counts() {
        let torus = Geometry::torus(3, 2).unwrap();
        for v in 0..torus.len() {
            assert_eq!(torus.degree(v), 6);
        }
        let boxed = Geometry::zd_box(2, 1).unwrap();
        let corner = boxed.index(&[-1, -1]);
        let center = boxed.index(&[0, 0]);
        assert_eq!(boxed.degree(corner), 2);
        assert_eq!(boxed.degree(center), 4);
    }

    #[test]
    fn grid_cardinality_matches_mesh() {
        // |G_L| = (2·(half_side/L))^d independently of L.
        let g = Geometry::torus(2, 64).unwrap();
        for mesh in [1, 2, 4] {
            let gs = GridShell::new(&g, mesh, 6).unwrap();
            assert_eq!(gs.grid().len(), (2 * (64 / mesh) as usize).pow(2));
        }
    }

    #[test]
    fn shell_containment_invariant() {
        // For every y in the shell, B(y,2L) ⊆ B(x,2ℓL); holds whenever ℓ ≥ 6.
        for (ell, mesh, half) in [(8i64, 2i64, 48i64), (6, 1, 16), (7, 2, 30)] {
            let g = Geometry::torus(2, half).unwrap();
            let gs = GridShell::new(&g, mesh, ell).unwrap();
            for x in [0usize, g.index(&[3, -5]), g.index(&[half - 1, 0])] {
                let shell = gs.shell(x);
                assert!(!shell.is_empty());
                for &y in &shell {
                    for &z in &g.ball(y, 2 * mesh).unwrap() {
                        assert!(
                            g.dist(x, z) <= 2 * ell * mesh,
                            "containment fails at ell={ell} mesh={mesh}"
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn shell_disconnects_annulus() {
        // Removing the union of shell boxes leaves no path from B(x,ℓL) to
        // S(x,2ℓL): BFS from the inner ball avoiding the cover must not reach
        // the outer sphere. d=2 exhaustively over centers; d=3 spot checks.
        let check = |g: &Geometry, gs: &GridShell, x: usize| {
            let ell_l = gs.scale() * gs.mesh();
            let mut blocked = vec![false; g.len()];
            for cover_box in gs.renorm_cover(x).unwrap() {
                for v in cover_box {
                    blocked[v] = true;
                }
            }
            let inner = g.ball(x, ell_l).unwrap();
            let outer: Vec<usize> = g.sphere(x, 2 * ell_l).unwrap();
            let outer_set: std::collections::HashSet<usize> = outer.into_iter().collect();
            let mut seen = vec![false; g.len()];
            let mut queue = std::collections::VecDeque::new();
            for v in inner {
                if !blocked[v] {
                    seen[v] = true;
                    queue.push_back(v);
                }
            }
            while let Some(v) = queue.pop_front() {
                assert!(!outer_set.contains(&v), "cover failed to disconnect");
                g.for_each_neighbor(v, |n| {
                    if !seen[n] && !blocked[n] {
                        seen[n] = true;
                        queue.push_back(n);
                    }
                });
            }
        };
        let g2 = Geometry::torus(2, 16).unwrap();
        let gs2 = GridShell::new(&g2, 1, 6).unwrap();
        for x in (0..g2.len()).step_by(7) {
            check(&g2, &gs2, x);
        }
        // Odd ℓL exercises the rounded-down sphere radius ⌊3ℓL/2⌋.
        let g2b = Geometry::torus(2, 21).unwrap();
        let gs2b = GridShell::new(&g2b, 1, 7).unwrap();
        for x in (0..g2b.len()).step_by(11) {
            check(&g2b, &gs2b, x);
        }
        let g3 = Geometry::torus(3, 13).unwrap();
        let gs3 = GridShell::new(&g3, 1, 6).unwrap();
        for x in [0, g3.index(&[1, -2, 3]), g3.index(&[12, 7, -13])] {
            check(&g3, &gs3, x);
        }
    }

    #[test]
    fn scale_below_six_rejected() {
        let g = Geometry::torus(2, 16).unwrap();
        assert!(GridShell::new(&g, 1, 5).is_err());
    }

    #[test]
    fn circ_interval_dist_brute_force() {
        for side in [7i64, 8, 12] {
            for w in 0..=(side - 1) / 2 {
                for c in 0..side {
                    for p in 0..side {
                        let (lo, hi) = circ_interval_dist(side, p, c, w);
                        let mut dmin = i64::MAX;
                        let mut dmax = i64::MIN;
                        for off in -w..=w {
                            let m = (p - (c + off)).rem_euclid(side);
                            let d = m.min(side - m);
                            dmin = dmin.min(d);
                            dmax = dmax.max(d);
                        }
                        assert_eq!((lo, hi), (dmin, dmax), "side={side} w={w} c={c} p={p}");
                    }
                }
            }
        }
    }
}
