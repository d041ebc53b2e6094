//! Occupation fields ξ
//! and their percolation events: connectivity between vertex sets, the
//! translation-invariant annulus event on tori, and single-site pivotality.
//!
//! A site is open at level h when φ_x ≥ h (ties count as open). Since raising
//! the level can only close sites, every event here is increasing in the
//! configuration and decreasing in h; [`CrossingSweep::critical_level`]
//! exploits this monotonicity to evaluate a whole level grid from one sample.

use crate::lattice::{Geometry, Mode};
use crate::{Error, Result};

/// Binary site configuration obtained by thresholding a field.
#[derive(Debug, Clone)]
pub struct OccupationField {
    geom: Geometry,
    pub open: Vec<bool>,
}

impl OccupationField {
    /// ξ_x = 1{φ_x ≥ h}.
    pub fn from_level(geom: &Geometry, values: &[f64], h: f64) -> Self {
        OccupationField {
            geom: geom.clone(),
            open: values.iter().map(|&v| v >= h).collect(),
        }
    }

    /// ξ_x = 1{φ_x ≥ h_x} for a per-site profile.
    pub fn from_profile(geom: &Geometry, values: &[f64], profile: &[f64]) -> Result<Self> {
        if profile.len() != values.len() || !profile.iter().all(|h| h.is_finite()) {
            return Err(Error::config("level profile must be finite, one per site"));
        }
        Ok(OccupationField {
            geom: geom.clone(),
            open: values.iter().zip(profile).map(|(&v, &h)| v >= h).collect(),
        })
    }

    pub fn from_bits(geom: &Geometry, open: Vec<bool>) -> Self {
        assert_eq!(open.len(), geom.len());
        OccupationField {
            geom: geom.clone(),
            open,
        }
    }

    pub fn geometry(&self) -> &Geometry {
        &self.geom
    }

    pub fn open_count(&self) -> usize {
        self.open.iter().filter(|&&b| b).count()
    }
}

/// Disjoint-set forest with union by size and path halving.
#[derive(Debug, Clone)]
pub struct UnionFind {
    parent: Vec<usize>,
    size: Vec<usize>,
}

impl UnionFind {
    pub fn new(len: usize) -> Self {
        UnionFind {
            parent: (0..len).collect(),
            size: vec![1; len],
        }
    }

    pub fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    pub fn union(&mut self, a: usize, b: usize) {
        let mut ra = self.find(a);
        let mut rb = self.find(b);
        if ra == rb {
            return;
        }
        if self.size[ra] < self.size[rb] {
            std::mem::swap(&mut ra, &mut rb);
        }
        self.parent[rb] = ra;
        self.size[ra] += self.size[rb];
    }

    pub fn connected(&mut self, a: usize, b: usize) -> bool {
        self.find(a) == self.find(b)
    }
}

/// Cluster ids over the open sites, with per-cluster coordinate extents (in a
/// fixed unwrapping) for diameter pruning.
#[derive(Debug, Clone)]
pub struct ClusterLabeling {
    /// Cluster id per vertex; `usize::MAX` on closed sites.
    pub label: Vec<usize>,
    pub count: usize,
    /// Per cluster and axis: smallest and largest coordinate of any member.
    pub min_coord: Vec<Vec<i64>>,
    pub max_coord: Vec<Vec<i64>>,
}

impl ClusterLabeling {
    /// Upper bound on the ℓ∞ diameter of a cluster. A wrapped cluster spans a
    /// whole axis of coordinates, so the bound stays conservative on tori.
    pub fn diameter_bound(&self, cluster: usize) -> i64 {
        self.min_coord[cluster]
            .iter()
            .zip(&self.max_coord[cluster])
            .map(|(lo, hi)| hi - lo)
            .max()
            .unwrap_or(0)
    }
}

/// Labels nearest-neighbor clusters of open sites.
pub fn label_clusters(occ: &OccupationField) -> ClusterLabeling {
    let geom = &occ.geom;
    let n = geom.len();
    let mut uf = UnionFind::new(n);
    for i in 0..n {
        if !occ.open[i] {
            continue;
        }
        geom.for_each_neighbor(i, |nb| {
            // Visit each edge once.
            if nb > i && occ.open[nb] {
                uf.union(i, nb);
            }
        });
    }
    let mut label = vec![usize::MAX; n];
    let mut min_coord: Vec<Vec<i64>> = Vec::new();
    let mut max_coord: Vec<Vec<i64>> = Vec::new();
    let mut root_to_id = vec![usize::MAX; n];
    let d = geom.dim();
    let mut coord = vec![0i64; d];
    for i in 0..n {
        if !occ.open[i] {
            continue;
        }
        let root = uf.find(i);
        let id = if root_to_id[root] == usize::MAX {
            let id = min_coord.len();
            root_to_id[root] = id;
            min_coord.push(vec![i64::MAX; d]);
            max_coord.push(vec![i64::MIN; d]);
            id
        } else {
            root_to_id[root]
        };
        label[i] = id;
        geom.coord_into(i, &mut coord);
        for axis in 0..d {
            min_coord[id][axis] = min_coord[id][axis].min(coord[axis]);
            max_coord[id][axis] = max_coord[id][axis].max(coord[axis]);
        }
    }
    ClusterLabeling {
        label,
        count: min_coord.len(),
        min_coord,
        max_coord,
    }
}

/// True when an open nearest-neighbor path connects `a` to `b`; a site lying
/// in both sets crosses with a path of length zero provided it is open.
pub fn crosses(occ: &OccupationField, a: &[usize], b: &[usize]) -> Result<bool> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::config("crossing endpoints must be nonempty"));
    }
    let geom = &occ.geom;
    let mut in_b = vec![false; geom.len()];
    for &s in b {
        in_b[s] = true;
    }
    let mut seen = vec![false; geom.len()];
    let mut stack: Vec<usize> = Vec::new();
    for &s in a {
        if occ.open[s] && !seen[s] {
            seen[s] = true;
            stack.push(s);
        }
    }
    while let Some(v) = stack.pop() {
        if in_b[v] {
            return Ok(true);
        }
        geom.for_each_neighbor(v, |nb| {
            if occ.open[nb] && !seen[nb] {
                seen[nb] = true;
                stack.push(nb);
            }
        });
    }
    Ok(false)
}

/// The translation-invariant annulus event: some torus point x has an open
/// crossing from B(x, ℓL) to S(x, 2ℓL).
///
/// Clusters of ℓ∞ diameter below ℓL cannot witness the event and are pruned;
/// every surviving cluster is verified exactly. A connected cluster attains
/// every ℓ∞ distance between its nearest and farthest point from x, so it
/// meets S(x, 2ℓL) precisely when dist(x,C) ≤ 2ℓL ≤ maxdist(x,C); combined
/// with dist(x,C) ≤ ℓL the witness condition becomes
/// dist(x,C) ≤ ℓL and maxdist(x,C) ≥ 2ℓL.
pub fn annulus_event(occ: &OccupationField, mesh: i64, scale: i64) -> Result<bool> {
    let geom = &occ.geom;
    let Mode::Torus { half_side } = geom.mode() else {
        return Err(Error::config("annulus event requires a torus"));
    };
    if mesh < 1 || scale < 1 {
        return Err(Error::config("mesh and scale must be positive"));
    }
    let r1 = scale * mesh;
    let r2 = 2 * r1;
    if 2 * r2 >= 2 * half_side {
        return Err(Error::config(
            "annulus of outer radius 2ℓL does not fit on the torus",
        ));
    }
    let labels = label_clusters(occ);
    let side = geom.side() as usize;
    let d = geom.dim();
    let n = geom.len();
    let mut mask = vec![false; n];
    let mut coord = vec![0i64; d];
    for cluster in 0..labels.count {
        if labels.diameter_bound(cluster) < r1 {
            continue;
        }
        // Member mask and per-axis attained coordinates (shifted to 0..side).
        for m in mask.iter_mut() {
            *m = false;
        }
        let mut attained = vec![vec![false; side]; d];
        for i in 0..n {
            if labels.label[i] == cluster {
                mask[i] = true;
                geom.coord_into(i, &mut coord);
                for axis in 0..d {
                    attained[axis][(coord[axis] + half_side) as usize] = true;
                }
            }
        }
        // maxdist(x, C) = max_axis max_{s attained} circ(s − x_axis).
        let mut far = vec![vec![0i64; side]; d];
        for axis in 0..d {
            for t in 0..side {
                let mut best = 0i64;
                for (s, &hit) in attained[axis].iter().enumerate() {
                    if hit {
                        let raw = (s as i64 - t as i64).rem_euclid(side as i64);
                        best = best.max(raw.min(side as i64 - raw));
                    }
                }
                far[axis][t] = best;
            }
        }
        dilate(geom, &mut mask, r1);
        let mut rem;
        for (x, &near) in mask.iter().enumerate() {
            if !near {
                continue;
            }
            rem = x;
            let mut maxdist = 0i64;
            for axis in 0..d {
                let stride = geom.len() / side.pow(axis as u32 + 1);
                let c = rem / stride;
                rem %= stride;
                maxdist = maxdist.max(far[axis][c]);
            }
            if maxdist >= r2 {
                return Ok(true);
            }
        }
    }
    Ok(false)
}

/// In-place binary dilation of `mask` by the ℓ∞ ball of radius `r`, one
/// circular sliding window per axis.
fn dilate(geom: &Geometry, mask: &mut [bool], r: i64) {
    let side = geom.side() as usize;
    let d = geom.dim();
    let n = mask.len();
    let r = r as usize;
    let mut line = vec![0u32; side];
    let mut stride = 1usize;
    let mut axis_strides = vec![0usize; d];
    for axis in (0..d).rev() {
        axis_strides[axis] = stride;
        stride *= side;
    }
    for &stride in &axis_strides {
        let block = stride * side;
        for base_block in (0..n).step_by(block) {
            for off in 0..stride {
                let base = base_block + off;
                let mut any = 0u32;
                for (j, slot) in line.iter_mut().enumerate() {
                    *slot = mask[base + j * stride] as u32;
                    any |= *slot;
                }
                if any == 0 {
                    continue;
                }
                // Circular window sum over radius r via prefix sums.
                let mut pref = vec![0u32; side + 1];
                for j in 0..side {
                    pref[j + 1] = pref[j] + line[j];
                }
                let total = pref[side];
                for (j, dst) in (0..side).map(|j| (j, base + j * stride)) {
                    let lo = j as i64 - r as i64;
                    let hi = j as i64 + r as i64;
                    let covered = if hi - lo + 1 >= side as i64 {
                        total
                    } else {
                        let mut s = 0u32;
                        let (mut a, mut b) = (lo, hi);
                        while b - a >= 0 {
                            let aw = a.rem_euclid(side as i64) as usize;
                            let span = (side - aw).min((b - a + 1) as usize);
                            s += pref[aw + span] - pref[aw];
                            a += span as i64;
                            let _ = b;
                            if a > hi {
                                break;
                            }
                            b = hi;
                        }
                        s
                    };
                    mask[dst] = covered > 0;
                }
            }
        }
    }
}

/// Exhaustive-center evaluation of the annulus event, used as the independent
/// oracle in tests.
#[cfg(test)]
pub(crate) fn annulus_event_naive(occ: &OccupationField, mesh: i64, scale: i64) -> Result<bool> {
    let geom = &occ.geom;
    let Mode::Torus { .. } = geom.mode() else {
        return Err(Error::config("annulus event requires a torus"));
    };
    let r1 = scale * mesh;
    let r2 = 2 * r1;
    for x in 0..geom.len() {
        let inner = geom.ball(x, r1)?;
        let outer = geom.sphere(x, r2)?;
        let occ_inner: Vec<usize> = inner.into_iter().filter(|&s| occ.open[s]).collect();
        if occ_inner.is_empty() {
            continue;
        }
        if crosses(occ, &occ_inner, &outer)? {
            return Ok(true);
        }
    }
    Ok(false)
}

/// An increasing event over configurations on an ordered site list.
pub trait IncreasingEvent: Sync {
    /// The sites K carrying the event, as geometry indices.
    fn sites(&self) -> &[usize];
    /// Whether the event holds; `open[i]` is the state of `sites()[i]`.
    fn occurs(&self, open: &[bool]) -> bool;
}

/// Event given as an explicit monotone subset of {0,1}^K, |K| ≤ 6, stored as a
/// 2^|K|-bit truth table.
#[derive(Debug, Clone)]
pub struct ExplicitEvent {
    sites: Vec<usize>,
    table: u64,
}

impl ExplicitEvent {
    pub fn new(sites: Vec<usize>, table: u64) -> Result<Self> {
        let k = sites.len();
        if k == 0 || k > 6 {
            return Err(Error::config("explicit events support 1 ≤ |K| ≤ 6"));
        }
        if k < 6 && table >> (1u64 << k) != 0 {
            return Err(Error::config("truth table has bits beyond 2^|K|"));
        }
        if !table_is_monotone(table, k) {
            return Err(Error::config("event is not increasing"));
        }
        Ok(ExplicitEvent { sites, table })
    }

    /// Builds the table from a predicate and rejects non-monotone ones.
    pub fn from_predicate(sites: Vec<usize>, pred: impl Fn(&[bool]) -> bool) -> Result<Self> {
        let k = sites.len();
        if k == 0 || k > 6 {
            return Err(Error::config("explicit events support 1 ≤ |K| ≤ 6"));
        }
        let mut table = 0u64;
        let mut cfg = vec![false; k];
        for bits in 0..(1u64 << k) {
            for (i, c) in cfg.iter_mut().enumerate() {
                *c = bits >> i & 1 == 1;
            }
            if pred(&cfg) {
                table |= 1 << bits;
            }
        }
        Self::new(sites, table)
    }

    /// The single-site event {Y_x = 1}.
    pub fn dictator(sites: Vec<usize>, position: usize) -> Result<Self> {
        Self::from_predicate(sites, |cfg| cfg[position])
    }

    pub fn table(&self) -> u64 {
        self.table
    }

    /// Configurations (as bit patterns) belonging to the event.
    pub fn member_configs(&self) -> Vec<u64> {
        let k = self.sites.len();
        (0..(1u64 << k)).filter(|&c| self.table >> c & 1 == 1).collect()
    }
}

impl IncreasingEvent for ExplicitEvent {
    fn sites(&self) -> &[usize] {
        &self.sites
    }

    fn occurs(&self, open: &[bool]) -> bool {
        let mut bits = 0u64;
        for (i, &o) in open.iter().enumerate() {
            if o {
                bits |= 1 << i;
            }
        }
        self.table >> bits & 1 == 1
    }
}

fn table_is_monotone(table: u64, k: usize) -> bool {
    for cfg in 0..(1u64 << k) {
        if table >> cfg & 1 == 0 {
            continue;
        }
        // Closing any open bit must not create the event elsewhere; equivalently
        // every superset of a member is a member.
        for bit in 0..k {
            if cfg >> bit & 1 == 0 && table >> (cfg | 1 << bit) & 1 == 0 {
                return false;
            }
        }
    }
    true
}

/// All monotone truth tables on k sites (constants included); there are 6 for
/// k = 2, 20 for k = 3, and 168 for k = 4.
pub fn enumerate_monotone_tables(k: usize) -> Vec<u64> {
    assert!(k >= 1 && k <= 4, "enumeration supported for k ≤ 4");
    (0..(1u128 << (1usize << k)))
        .map(|t| t as u64)
        .filter(|&t| table_is_monotone(t, k))
        .collect()
}

/// Open-path connectivity between two site sets inside a window, as an
/// increasing event (the sites are the window, adjacency restricted to it).
#[derive(Debug, Clone)]
pub struct CrossingEvent {
    window: Vec<usize>,
    neighbors: Vec<Vec<u32>>,
    a_flag: Vec<bool>,
    b_flag: Vec<bool>,
}

impl CrossingEvent {
    pub fn new(geom: &Geometry, window: Vec<usize>, a: &[usize], b: &[usize]) -> Result<Self> {
        if a.is_empty() || b.is_empty() {
            return Err(Error::config("crossing endpoints must be nonempty"));
        }
        let mut local = vec![u32::MAX; geom.len()];
        for (i, &s) in window.iter().enumerate() {
            local[s] = i as u32;
        }
        for &s in a.iter().chain(b) {
            if local[s] == u32::MAX {
                return Err(Error::config("endpoint site outside the window"));
            }
        }
        let mut neighbors = vec![Vec::new(); window.len()];
        for (i, &s) in window.iter().enumerate() {
            geom.for_each_neighbor(s, |nb| {
                if local[nb] != u32::MAX {
                    neighbors[i].push(local[nb]);
                }
            });
        }
        let mut a_flag = vec![false; window.len()];
        let mut b_flag = vec![false; window.len()];
        for &s in a {
            a_flag[local[s] as usize] = true;
        }
        for &s in b {
            b_flag[local[s] as usize] = true;
        }
        Ok(CrossingEvent {
            window,
            neighbors,
            a_flag,
            b_flag,
        })
    }
}

impl IncreasingEvent for CrossingEvent {
    fn sites(&self) -> &[usize] {
        &self.window
    }

    fn occurs(&self, open: &[bool]) -> bool {
        let m = self.window.len();
        let mut seen = vec![false; m];
        let mut stack = Vec::new();
        for i in 0..m {
            if self.a_flag[i] && open[i] {
                seen[i] = true;
                stack.push(i);
            }
        }
        while let Some(v) = stack.pop() {
            if self.b_flag[v] {
                return true;
            }
            for &nb in &self.neighbors[v] {
                let nb = nb as usize;
                if open[nb] && !seen[nb] {
                    seen[nb] = true;
                    stack.push(nb);
                }
            }
        }
        false
    }
}

/// The annulus event as an increasing event on the full torus configuration.
#[derive(Debug, Clone)]
pub struct AnnulusEvent {
    geom: Geometry,
    sites: Vec<usize>,
    mesh: i64,
    scale: i64,
}

impl AnnulusEvent {
    pub fn new(geom: &Geometry, mesh: i64, scale: i64) -> Result<Self> {
        let Mode::Torus { half_side } = geom.mode() else {
            return Err(Error::config("annulus event requires a torus"));
        };
        if 4 * scale * mesh >= 2 * half_side {
            return Err(Error::config(
                "annulus of outer radius 2ℓL does not fit on the torus",
            ));
        }
        Ok(AnnulusEvent {
            geom: geom.clone(),
            sites: (0..geom.len()).collect(),
            mesh,
            scale,
        })
    }
}

impl IncreasingEvent for AnnulusEvent {
    fn sites(&self) -> &[usize] {
        &self.sites
    }

    fn occurs(&self, open: &[bool]) -> bool {
        let occ = OccupationField::from_bits(&self.geom, open.to_vec());
        annulus_event(&occ, self.mesh, self.scale).expect("validated at construction")
    }
}

/// Sites of K whose single-site toggle changes the event verdict, by double
/// evaluation per site.
pub fn pivotal_sites(event: &dyn IncreasingEvent, open: &[bool]) -> Vec<usize> {
    let k = event.sites().len();
    assert_eq!(open.len(), k);
    let mut work = open.to_vec();
    let mut out = Vec::new();
    for i in 0..k {
        work[i] = true;
        let with = event.occurs(&work);
        work[i] = false;
        let without = event.occurs(&work);
        work[i] = open[i];
        if with != without {
            out.push(event.sites()[i]);
        }
    }
    out
}

/// Incremental union-find sweep computing, for one field sample, the largest
/// level at which an open crossing from `a` to `b` exists inside the window.
/// The crossing holds at level h exactly when h ≤ critical level.
#[derive(Debug, Clone)]
pub struct CrossingSweep {
    window: Vec<usize>,
    neighbors: Vec<Vec<u32>>,
    a_flag: Vec<bool>,
    b_flag: Vec<bool>,
}

impl CrossingSweep {
    pub fn new(geom: &Geometry, window: Vec<usize>, a: &[usize], b: &[usize]) -> Result<Self> {
        let ev = CrossingEvent::new(geom, window, a, b)?;
        Ok(CrossingSweep {
            window: ev.window,
            neighbors: ev.neighbors,
            a_flag: ev.a_flag,
            b_flag: ev.b_flag,
        })
    }

    pub fn window(&self) -> &[usize] {
        &self.window
    }

    /// Activates sites in decreasing field order until the endpoint sets
    /// connect; returns the field value at which they do, or −∞ if they never
    /// connect even with the whole window open.
    pub fn critical_level(&self, values: &[f64]) -> f64 {
        let m = self.window.len();
        let mut order: Vec<u32> = (0..m as u32).collect();
        order.sort_unstable_by(|&i, &j| {
            values[self.window[j as usize]]
                .partial_cmp(&values[self.window[i as usize]])
                .expect("field values are finite")
        });
        // Two virtual roots m (side a) and m+1 (side b).
        let mut uf = UnionFind::new(m + 2);
        let mut active = vec![false; m];
        for &i in &order {
            let i = i as usize;
            active[i] = true;
            if self.a_flag[i] {
                uf.union(i, m);
            }
            if self.b_flag[i] {
                uf.union(i, m + 1);
            }
            for &nb in &self.neighbors[i] {
                if active[nb as usize] {
                    uf.union(i, nb as usize);
                }
            }
            if uf.connected(m, m + 1) {
                return values[self.window[i]];
            }
        }
        f64::NEG_INFINITY
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    #[test]
    fn occupation_extreme_levels_and_monotonicity() {
        let geom = Geometry::torus(2, 3).unwrap();
        let mut rng = crate::rng::stream(1, "levelset-occ", &[]);
        let values: Vec<f64> = (0..geom.len()).map(|_| rng.random::<f64>() * 4.0 - 2.0).collect();
        assert!(OccupationField::from_level(&geom, &values, -1e9)
            .open
            .iter()
            .all(|&b| b));
        assert!(OccupationField::from_level(&geom, &values, 1e9)
            .open
            .iter()
            .all(|&b| !b));
        let lo = OccupationField::from_level(&geom, &values, -0.3);
        let hi = OccupationField::from_level(&geom, &values, 0.8);
        for i in 0..geom.len() {
            assert!(!hi.open[i] || lo.open[i]);
        }
    }

    #[test]
    fn tie_counts_as_open() {
        let geom = Geometry::torus(2, 1).unwrap();
        let mut values = vec![0.0; geom.len()];
        values[0] = 1.25;
        let occ = OccupationField::from_level(&geom, &values, 1.25);
        assert!(occ.open[0]);
        assert!(!occ.open[1]);
    }

    #[test]
    fn crosses_trivial_configurations() {
        let geom = Geometry::zd_box(3, 4).unwrap();
        let a = geom.ball(geom.index(&[0, 0, 0]), 1).unwrap();
        let b = geom.sphere(geom.index(&[0, 0, 0]), 3).unwrap();
        let all = OccupationField::from_bits(&geom, vec![true; geom.len()]);
        assert!(crosses(&all, &a, &b).unwrap());
        let none = OccupationField::from_bits(&geom, vec![false; geom.len()]);
        assert!(!crosses(&none, &a, &b).unwrap());
    }

    /// Hand-built monotone staircase from B(0,1) to S(0,2) in a 5³ box; the
    /// path is open, the rest closed; closing one path site severs it.
    #[test]
    fn crosses_staircase_path() {
        let geom = Geometry::zd_box(3, 2).unwrap();
        let path = [[0, 0, 0], [1, 0, 0], [1, 1, 0], [2, 1, 0]];
        let mut open = vec![false; geom.len()];
        for p in &path {
            open[geom.index(p)] = true;
        }
        let a = geom.ball(geom.index(&[0, 0, 0]), 1).unwrap();
        let b = geom.sphere(geom.index(&[0, 0, 0]), 2).unwrap();
        let occ = OccupationField::from_bits(&geom, open.clone());
        assert!(crosses(&occ, &a, &b).unwrap());
        open[geom.index(&[1, 1, 0])] = false;
        let cut = OccupationField::from_bits(&geom, open);
        assert!(!crosses(&cut, &a, &b).unwrap());
    }

    #[test]
    fn annulus_trivial_configurations() {
        let geom = Geometry::torus(2, 9).unwrap();
        let full = OccupationField::from_bits(&geom, vec![true; geom.len()]);
        assert!(annulus_event(&full, 2, 2).unwrap());
        let empty = OccupationField::from_bits(&geom, vec![false; geom.len()]);
        assert!(!annulus_event(&empty, 2, 2).unwrap());
        // Outer radius must fit.
        assert!(annulus_event(&full, 5, 2).is_err());
    }

    fn random_occ(geom: &Geometry, density: f64, rng: &mut impl Rng) -> OccupationField {
        let open: Vec<bool> = (0..geom.len()).map(|_| rng.random::<f64>() < density).collect();
        OccupationField::from_bits(geom, open)
    }

    #[test]
    fn annulus_matches_exhaustive_center_oracle() {
        let geom = Geometry::torus(2, 16).unwrap();
        let mut rng = crate::rng::stream(7, "levelset-annulus-2d", &[]);
        let mut hits = 0;
        for trial in 0..1000 {
            let density = 0.02 + 0.08 * (trial % 10) as f64;
            let occ = random_occ(&geom, density, &mut rng);
            let fast = annulus_event(&occ, 2, 2).unwrap();
            let slow = annulus_event_naive(&occ, 2, 2).unwrap();
            assert_eq!(fast, slow, "verdicts differ on trial {trial}");
            hits += fast as usize;
        }
        assert!(hits > 0, "test never exercised the positive branch");
    }

    #[test]
    fn annulus_matches_oracle_3d() {
        let geom = Geometry::torus(3, 9).unwrap();
        let mut rng = crate::rng::stream(8, "levelset-annulus-3d", &[]);
        let mut hits = 0;
        for trial in 0..50 {
            let density = 0.05 + 0.25 * (trial % 5) as f64;
            let occ = random_occ(&geom, density, &mut rng);
            let fast = annulus_event(&occ, 1, 2).unwrap();
            let slow = annulus_event_naive(&occ, 1, 2).unwrap();
            assert_eq!(fast, slow, "verdicts differ on trial {trial}");
            hits += fast as usize;
        }
        assert!(hits > 0);
    }

    #[test]
    fn annulus_translation_invariant() {
        let geom = Geometry::torus(2, 10).unwrap();
        let mut rng = crate::rng::stream(9, "levelset-annulus-shift", &[]);
        for _ in 0..40 {
            let occ = random_occ(&geom, 0.35, &mut rng);
            let verdict = annulus_event(&occ, 2, 2).unwrap();
            for shift in [[1i64, 0], [0, 7], [5, 13]] {
                let mut shifted = vec![false; geom.len()];
                let mut coord = vec![0i64; 2];
                for i in 0..geom.len() {
                    geom.coord_into(i, &mut coord);
                    let moved = geom.index(&[coord[0] + shift[0], coord[1] + shift[1]]);
                    shifted[moved] = occ.open[i];
                }
                let occ_shift = OccupationField::from_bits(&geom, shifted);
                assert_eq!(annulus_event(&occ_shift, 2, 2).unwrap(), verdict);
            }
        }
    }

    #[test]
    fn explicit_event_validation() {
        // {Y_0 = 1} is increasing; its complement is not.
        assert!(ExplicitEvent::new(vec![0, 1], 0b1010).is_ok());
        assert!(ExplicitEvent::new(vec![0, 1], 0b0101).is_err());
        assert!(ExplicitEvent::from_predicate(vec![0, 1, 2], |c| {
            c.iter().filter(|&&b| b).count() >= 2
        })
        .is_ok());
    }

    #[test]
    fn monotone_enumeration_counts() {
        assert_eq!(enumerate_monotone_tables(1).len(), 3);
        assert_eq!(enumerate_monotone_tables(2).len(), 6);
        assert_eq!(enumerate_monotone_tables(3).len(), 20);
        assert_eq!(enumerate_monotone_tables(4).len(), 168);
    }

    #[test]
    fn pivotal_dictator_and_full_event() {
        let dict = ExplicitEvent::dictator(vec![10, 11, 12], 1).unwrap();
        assert_eq!(pivotal_sites(&dict, &[false, false, true]), vec![11]);
        assert_eq!(pivotal_sites(&dict, &[true, true, false]), vec![11]);
        let full = ExplicitEvent::new(vec![10, 11], 0b1111).unwrap();
        assert!(pivotal_sites(&full, &[false, true]).is_empty());
    }

    /// Independent oracle: per-site double path search run directly on the
    /// geometry, without the event's precomputed adjacency.
    #[test]
    fn pivotal_crossing_matches_double_bfs() {
        let geom = Geometry::zd_box(3, 1).unwrap();
        let window: Vec<usize> = (0..geom.len()).collect();
        let a = geom.ball(geom.index(&[0, 0, 0]), 0).unwrap();
        let b = geom.sphere(geom.index(&[0, 0, 0]), 1).unwrap();
        let event = CrossingEvent::new(&geom, window.clone(), &a, &b).unwrap();
        let mut rng = crate::rng::stream(13, "levelset-pivotal", &[]);
        let bfs = |open: &[bool]| -> bool {
            let occ = OccupationField::from_bits(&geom, open.to_vec());
            crosses(&occ, &a, &b).unwrap()
        };
        for _ in 0..100 {
            let open: Vec<bool> = (0..geom.len()).map(|_| rng.random::<f64>() < 0.5).collect();
            let fast = pivotal_sites(&event, &open);
            let mut slow = Vec::new();
            let mut work = open.clone();
            for s in 0..geom.len() {
                work[s] = true;
                let with = bfs(&work);
                work[s] = false;
                let without = bfs(&work);
                work[s] = open[s];
                if with != without {
                    slow.push(s);
                }
            }
            assert_eq!(fast, slow);
        }
    }

    #[test]
    fn critical_level_consistent_with_thresholding() {
        let geom = Geometry::torus(2, 6).unwrap();
        let origin = geom.index(&[0, 0]);
        let window = geom.ball(origin, 4).unwrap();
        let a = geom.ball(origin, 2).unwrap();
        let b = geom.sphere(origin, 4).unwrap();
        let sweep = CrossingSweep::new(&geom, window.clone(), &a, &b).unwrap();
        let event = CrossingEvent::new(&geom, window.clone(), &a, &b).unwrap();
        let mut rng = crate::rng::stream(17, "levelset-sweep", &[]);
        for _ in 0..50 {
            let values: Vec<f64> = (0..geom.len())
                .map(|_| rng.random::<f64>() * 2.0 - 1.0)
                .collect();
            let hc = sweep.critical_level(&values);
            for h in [-1.5, -0.8, -0.2, 0.0, 0.3, 0.9, 1.4] {
                let open: Vec<bool> = window.iter().map(|&s| values[s] >= h).collect();
                assert_eq!(event.occurs(&open), h <= hc, "h={h} hc={hc}");
            }
            // The critical level itself is attained (ties are open).
            if hc.is_finite() {
                let open: Vec<bool> = window.iter().map(|&s| values[s] >= hc).collect();
                assert!(event.occurs(&open));
            }
        }
    }

    proptest! {
        #[test]
        fn crossing_is_symmetric(seed in 0u64..500) {
            let geom = Geometry::torus(2, 4).unwrap();
            let mut rng = crate::rng::stream(seed, "levelset-sym", &[]);
            let occ = random_occ(&geom, 0.5, &mut rng);
            let a = geom.ball(geom.index(&[0, 0]), 1).unwrap();
            let b = geom.sphere(geom.index(&[0, 0]), 3).unwrap();
            prop_assert_eq!(
                crosses(&occ, &a, &b).unwrap(),
                crosses(&occ, &b, &a).unwrap()
            );
        }
    }
}
