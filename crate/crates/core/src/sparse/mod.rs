//! Submanifold sparse convolution over `(S, H, W)` site grids.
//!
//! A [`SparseFeatureMap`] stores a channel vector for each *active* site;
//! every other site is exactly zero. Convolutions read only active
//! neighbours and write only active sites, so the active set is preserved
//! layer to layer. Neighbour lookup goes through a [`Rulebook`] built from
//! per-slice coordinate hash maps, once per site set and kernel size.

pub mod flops;

use std::collections::HashMap;
use std::io::Write;
use std::sync::{Arc, Mutex};

use crate::error::{shape_err, Error, Result};
use crate::tensor::Tensor;

pub use flops::{FlopsLedger, FlopsReport, LayerFlops, MacCount};

/// A binary map over `(S, H, W)`, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BinaryMap {
    extents: [usize; 3],
    bits: Vec<bool>,
}

impl BinaryMap {
    pub fn new(extents: [usize; 3], bits: Vec<bool>) -> Result<Self> {
        if extents.iter().product::<usize>() != bits.len() {
            return Err(shape_err(
                "binary map",
                format!("extents {extents:?} need {} bits, got {}", extents.iter().product::<usize>(), bits.len()),
            ));
        }
        Ok(Self { extents, bits })
    }

    pub fn ones(extents: [usize; 3]) -> Self {
        Self {
            extents,
            bits: vec![true; extents.iter().product()],
        }
    }

    pub fn zeros(extents: [usize; 3]) -> Self {
        Self {
            extents,
            bits: vec![false; extents.iter().product()],
        }
    }

    pub fn extents(&self) -> [usize; 3] {
        self.extents
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn get(&self, s: usize, h: usize, w: usize) -> bool {
        let [_, hh, ww] = self.extents;
        self.bits[(s * hh + h) * ww + w]
    }

    pub fn set(&mut self, s: usize, h: usize, w: usize, v: bool) {
        let [_, hh, ww] = self.extents;
        self.bits[(s * hh + h) * ww + w] = v;
    }

    pub fn count_ones(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }
}

/// Neighbour pairs per kernel tap for one site set.
#[derive(Debug)]
pub struct Rulebook {
    pub z: usize,
    /// `taps[ky * z + kx]` holds `(input site, output site)` pairs.
    pub taps: Vec<Vec<(u32, u32)>>,
    /// Active sites inside each site's `z×z` window, itself included.
    pub active_neighbors: Vec<u32>,
}

impl Rulebook {
    pub fn pair_count(&self) -> usize {
        self.taps.iter().map(Vec::len).sum()
    }
}

/// The active coordinates of a sparse map, sorted row-major, with per-slice
/// coordinate hash maps for neighbour lookup.
pub struct SiteSet {
    extents: [usize; 3],
    coords: Vec<[usize; 3]>,
    slices: Vec<HashMap<(usize, usize), u32>>,
    rulebooks: Mutex<Vec<Arc<Rulebook>>>,
}

impl std::fmt::Debug for SiteSet {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SiteSet")
            .field("extents", &self.extents)
            .field("active", &self.coords.len())
            .finish()
    }
}

impl PartialEq for SiteSet {
    fn eq(&self, other: &Self) -> bool {
        self.extents == other.extents && self.coords == other.coords
    }
}

impl SiteSet {
    fn from_sorted(extents: [usize; 3], coords: Vec<[usize; 3]>) -> Self {
        let mut slices = vec![HashMap::new(); extents[0]];
        for (i, &[s, h, w]) in coords.iter().enumerate() {
            slices[s].insert((h, w), i as u32);
        }
        Self {
            extents,
            coords,
            slices,
            rulebooks: Mutex::new(Vec::new()),
        }
    }

    pub fn from_map(map: &BinaryMap) -> Self {
        let [ss, hh, ww] = map.extents;
        let mut coords = Vec::new();
        for s in 0..ss {
            for h in 0..hh {
                for w in 0..ww {
                    if map.get(s, h, w) {
                        coords.push([s, h, w]);
                    }
                }
            }
        }
        Self::from_sorted(map.extents, coords)
    }

    pub fn full(extents: [usize; 3]) -> Self {
        Self::from_map(&BinaryMap::ones(extents))
    }

    /// Builds a site set from arbitrary coordinates; they must be in bounds
    /// and unique.
    pub fn from_coords(extents: [usize; 3], mut coords: Vec<[usize; 3]>) -> Result<Self> {
        for c in &coords {
            if c.iter().zip(&extents).any(|(v, e)| v >= e) {
                return Err(Error::InvalidArgument(format!("site {c:?} out of bounds {extents:?}")));
            }
        }
        coords.sort_unstable();
        if coords.windows(2).any(|p| p[0] == p[1]) {
            return Err(Error::InvalidArgument("duplicate active site".into()));
        }
        Ok(Self::from_sorted(extents, coords))
    }

    pub fn extents(&self) -> [usize; 3] {
        self.extents
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn coords(&self) -> &[[usize; 3]] {
        &self.coords
    }

    pub fn index_of(&self, s: usize, h: usize, w: usize) -> Option<usize> {
        self.slices.get(s)?.get(&(h, w)).map(|&i| i as usize)
    }

    pub fn to_map(&self) -> BinaryMap {
        let mut m = BinaryMap::zeros(self.extents);
        for &[s, h, w] in &self.coords {
            m.set(s, h, w, true);
        }
        m
    }

    /// Flat `(s, h, w)` row-major index of each active site.
    pub fn flat_positions(&self) -> Vec<usize> {
        let [_, hh, ww] = self.extents;
        self.coords.iter().map(|&[s, h, w]| (s * hh + h) * ww + w).collect()
    }

    /// Rulebook for an odd kernel size `z` (same padding), built on first use.
    pub fn rulebook(&self, z: usize) -> Arc<Rulebook> {
        let mut cache = self.rulebooks.lock().expect("rulebook cache poisoned");
        if let Some(rb) = cache.iter().find(|rb| rb.z == z) {
            return Arc::clone(rb);
        }
        let rb = Arc::new(self.build_rulebook(z));
        cache.push(Arc::clone(&rb));
        rb
    }

    fn build_rulebook(&self, z: usize) -> Rulebook {
        let pad = (z / 2) as isize;
        let [_, hh, ww] = self.extents;
        let mut taps = vec![Vec::new(); z * z];
        let mut active_neighbors = vec![0u32; self.coords.len()];
        for (out, &[s, h, w]) in self.coords.iter().enumerate() {
            let slice = &self.slices[s];
            for ky in 0..z {
                let y = h as isize + ky as isize - pad;
                if y < 0 || y >= hh as isize {
                    continue;
                }
                for kx in 0..z {
                    let x = w as isize + kx as isize - pad;
                    if x < 0 || x >= ww as isize {
                        continue;
                    }
                    if let Some(&inp) = slice.get(&(y as usize, x as usize)) {
                        taps[ky * z + kx].push((inp, out as u32));
                        active_neighbors[out] += 1;
                    }
                }
            }
        }
        Rulebook {
            z,
            taps,
            active_neighbors,
        }
    }

    /// Site set after 2×2/stride-2 pooling (odd extents padded on the high
    /// side with inactive sites), plus the contributing input sites of each
    /// pooled site.
    pub fn pooled(&self) -> (SiteSet, Vec<Vec<u32>>) {
        let [ss, hh, ww] = self.extents;
        let ext = [ss, hh.div_ceil(2), ww.div_ceil(2)];
        let mut children: HashMap<[usize; 3], Vec<u32>> = HashMap::new();
        for (i, &[s, h, w]) in self.coords.iter().enumerate() {
            children.entry([s, h / 2, w / 2]).or_default().push(i as u32);
        }
        let mut coords: Vec<[usize; 3]> = children.keys().copied().collect();
        coords.sort_unstable();
        let kids = coords.iter().map(|c| children[c].clone()).collect();
        (SiteSet::from_sorted(ext, coords), kids)
    }
}

/// Convolution geometry: odd kernel `z`, `m` input and `n` output channels,
/// stride 1, same padding.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub z: usize,
    pub m: usize,
    pub n: usize,
}

impl ConvSpec {
    pub fn new(z: usize, m: usize, n: usize) -> Result<Self> {
        if z.is_multiple_of(2) {
            return Err(Error::InvalidArgument(format!("kernel size {z} must be odd")));
        }
        if m == 0 || n == 0 {
            return Err(Error::InvalidArgument("channel counts must be >= 1".into()));
        }
        Ok(Self { z, m, n })
    }

    fn check_params(&self, k: &Tensor, b: &Tensor) -> Result<()> {
        if k.shape() != [self.n, self.m, self.z, self.z] {
            return Err(shape_err(
                "submanifold_conv",
                format!("kernel {:?} != [n {}, m {}, z {}, z {}]", k.shape(), self.n, self.m, self.z, self.z),
            ));
        }
        if b.shape() != [self.n] {
            return Err(shape_err("submanifold_conv", format!("bias {:?} != [{}]", b.shape(), self.n)));
        }
        Ok(())
    }
}

/// Feature vectors at the active sites of an `(C, S, H, W)` map.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseFeatureMap {
    channels: usize,
    sites: Arc<SiteSet>,
    /// `[active site][channel]`, row-major.
    features: Vec<f64>,
}

impl SparseFeatureMap {
    pub fn new(channels: usize, sites: Arc<SiteSet>, features: Vec<f64>) -> Result<Self> {
        if channels == 0 {
            return Err(Error::InvalidArgument("sparse map needs >= 1 channel".into()));
        }
        if features.len() != channels * sites.len() {
            return Err(shape_err(
                "sparse map",
                format!("{} sites x {channels} channels != {} values", sites.len(), features.len()),
            ));
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("sparse features".into()));
        }
        Ok(Self {
            channels,
            sites,
            features,
        })
    }

    pub(crate) fn from_parts(channels: usize, sites: Arc<SiteSet>, features: Vec<f64>) -> Self {
        debug_assert_eq!(features.len(), channels * sites.len());
        Self {
            channels,
            sites,
            features,
        }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    /// `(C, S, H, W)`.
    pub fn extents(&self) -> [usize; 4] {
        let [s, h, w] = self.sites.extents();
        [self.channels, s, h, w]
    }

    pub fn sites(&self) -> &Arc<SiteSet> {
        &self.sites
    }

    pub fn active_count(&self) -> usize {
        self.sites.len()
    }

    pub fn features(&self) -> &[f64] {
        &self.features
    }

    pub fn feature(&self, site: usize) -> &[f64] {
        &self.features[site * self.channels..(site + 1) * self.channels]
    }

    /// Value at `(c, s, h, w)`; inactive sites are zero.
    pub fn value_at(&self, c: usize, s: usize, h: usize, w: usize) -> f64 {
        self.sites
            .index_of(s, h, w)
            .map_or(0.0, |i| self.features[i * self.channels + c])
    }

    pub fn map_features(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            channels: self.channels,
            sites: Arc::clone(&self.sites),
            features: self.features.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Dense `[C, S, H, W]` view with zeros at inactive sites.
    pub fn densify(&self) -> Tensor {
        let [c, s, h, w] = self.extents();
        Tensor::from_raw(vec![c, s, h, w], scatter(&self.features, &self.sites, c))
    }

    /// CSV dump: a `# C=.. S=.. H=.. W=..` extents line, a column header, then
    /// one `s,h,w,c0,...` row per active site.
    pub fn write_csv(&self, mut out: impl Write) -> std::io::Result<()> {
        let [c, s, h, w] = self.extents();
        writeln!(out, "# C={c} S={s} H={h} W={w}")?;
        let cols: Vec<String> = (0..c).map(|i| format!("c{i}")).collect();
        writeln!(out, "s,h,w,{}", cols.join(","))?;
        for (i, &[si, hi, wi]) in self.sites.coords().iter().enumerate() {
            let vals: Vec<String> = self.feature(i).iter().map(|v| format!("{v}")).collect();
            writeln!(out, "{si},{hi},{wi},{}", vals.join(","))?;
        }
        Ok(())
    }
}

fn dense_extents(op: &'static str, t: &Tensor) -> Result<[usize; 4]> {
    match t.shape() {
        &[c, s, h, w] => Ok([c, s, h, w]),
        sh => Err(shape_err(op, format!("expected a [C,S,H,W] feature map, got {sh:?}"))),
    }
}

// ---------------------------------------------------------------------------
// kernels shared with the tape

/// Dense `[C,S,H,W]` → `[active][C]`.
pub(crate) fn gather(dense: &[f64], sites: &SiteSet, c: usize) -> Vec<f64> {
    let plane: usize = sites.extents().iter().product();
    let pos = sites.flat_positions();
    let mut out = Vec::with_capacity(pos.len() * c);
    for &p in &pos {
        for ch in 0..c {
            out.push(dense[ch * plane + p]);
        }
    }
    out
}

/// `[active][C]` → dense `[C,S,H,W]`, zeros elsewhere.
pub(crate) fn scatter(feats: &[f64], sites: &SiteSet, c: usize) -> Vec<f64> {
    let plane: usize = sites.extents().iter().product();
    let mut out = vec![0.0; c * plane];
    for (i, p) in sites.flat_positions().into_iter().enumerate() {
        for ch in 0..c {
            out[ch * plane + p] = feats[i * c + ch];
        }
    }
    out
}

/// `k [n,m,z,z]` → per-tap `[z²][n][m]`.
fn per_tap(k: &[f64], spec: &ConvSpec) -> Vec<f64> {
    let zz = spec.z * spec.z;
    let mut out = vec![0.0; k.len()];
    for co in 0..spec.n {
        for ci in 0..spec.m {
            for t in 0..zz {
                out[(t * spec.n + co) * spec.m + ci] = k[(co * spec.m + ci) * zz + t];
            }
        }
    }
    out
}

pub(crate) fn submanifold_macs(sites: &SiteSet, rb: &Rulebook, spec: &ConvSpec) -> MacCount {
    let mn = (spec.m * spec.n) as u64;
    let locations: usize = sites.extents().iter().product();
    MacCount {
        dense: (spec.z * spec.z) as u64 * mn * locations as u64,
        executed: rb.pair_count() as u64 * mn,
    }
}

pub(crate) fn submanifold_forward(rb: &Rulebook, nsites: usize, x: &[f64], k: &[f64], b: &[f64], spec: &ConvSpec) -> Vec<f64> {
    let (m, n) = (spec.m, spec.n);
    let kt = per_tap(k, spec);
    let mut out = Vec::with_capacity(nsites * n);
    for _ in 0..nsites {
        out.extend_from_slice(b);
    }
    for (t, pairs) in rb.taps.iter().enumerate() {
        let wt = &kt[t * n * m..(t + 1) * n * m];
        for &(i, o) in pairs {
            let xin = &x[i as usize * m..(i as usize + 1) * m];
            let orow = &mut out[o as usize * n..(o as usize + 1) * n];
            for (co, ov) in orow.iter_mut().enumerate() {
                let wrow = &wt[co * m..(co + 1) * m];
                *ov += wrow.iter().zip(xin).map(|(a, b)| a * b).sum::<f64>();
            }
        }
    }
    out
}

/// Returns `(gx, gk, gb)`.
pub(crate) fn submanifold_backward(
    rb: &Rulebook,
    nsites: usize,
    x: &[f64],
    k: &[f64],
    gy: &[f64],
    spec: &ConvSpec,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let (m, n, zz) = (spec.m, spec.n, spec.z * spec.z);
    let kt = per_tap(k, spec);
    let mut gx = vec![0.0; nsites * m];
    let mut gkt = vec![0.0; kt.len()];
    let mut gb = vec![0.0; n];
    for o in 0..nsites {
        for (g, v) in gb.iter_mut().zip(&gy[o * n..(o + 1) * n]) {
            *g += v;
        }
    }
    for (t, pairs) in rb.taps.iter().enumerate() {
        let wt = &kt[t * n * m..(t + 1) * n * m];
        let gwt = &mut gkt[t * n * m..(t + 1) * n * m];
        for &(i, o) in pairs {
            let (i, o) = (i as usize, o as usize);
            let xin = &x[i * m..(i + 1) * m];
            let gyo = &gy[o * n..(o + 1) * n];
            let gxi = &mut gx[i * m..(i + 1) * m];
            for (co, &g) in gyo.iter().enumerate() {
                if g == 0.0 {
                    continue;
                }
                let wrow = &wt[co * m..(co + 1) * m];
                let gwrow = &mut gwt[co * m..(co + 1) * m];
                for ci in 0..m {
                    gxi[ci] += wrow[ci] * g;
                    gwrow[ci] += g * xin[ci];
                }
            }
        }
    }
    let mut gk = vec![0.0; k.len()];
    for co in 0..n {
        for ci in 0..m {
            for t in 0..zz {
                gk[(co * m + ci) * zz + t] = gkt[(t * n + co) * m + ci];
            }
        }
    }
    (gx, gk, gb)
}

/// Max over the active children of each pooled site, per channel. Returns the
/// pooled features and the flat input index (`site * C + c`) of each max.
pub(crate) fn pool_forward(x: &[f64], c: usize, children: &[Vec<u32>]) -> (Vec<f64>, Vec<usize>) {
    let mut out = Vec::with_capacity(children.len() * c);
    let mut arg = Vec::with_capacity(children.len() * c);
    for kids in children {
        for ch in 0..c {
            let mut best = f64::NEG_INFINITY;
            let mut besti = 0;
            for &k in kids {
                let i = k as usize * c + ch;
                if x[i] > best || x[i].is_nan() {
                    best = x[i];
                    besti = i;
                }
            }
            out.push(best);
            arg.push(besti);
        }
    }
    (out, arg)
}

// ---------------------------------------------------------------------------
// public forward operations

/// Keeps the sites where `mask` is set, copying their channel vectors from
/// the dense `[C, S, H, W]` map.
pub fn to_sparse(dense: &Tensor, mask: &BinaryMap) -> Result<SparseFeatureMap> {
    let [c, s, h, w] = dense_extents("to_sparse", dense)?;
    if mask.extents() != [s, h, w] {
        return Err(shape_err(
            "to_sparse",
            format!("mask extents {:?} != map (S,H,W) {:?}", mask.extents(), [s, h, w]),
        ));
    }
    let sites = Arc::new(SiteSet::from_map(mask));
    let feats = gather(dense.data(), &sites, c);
    Ok(SparseFeatureMap::from_parts(c, sites, feats))
}

/// Submanifold convolution: output active set equals the input active set.
/// Returns the output and its MAC count (`a·m·n` executed per active site).
pub fn submanifold_conv(
    x: &SparseFeatureMap,
    spec: &ConvSpec,
    k: &Tensor,
    b: &Tensor,
) -> Result<(SparseFeatureMap, MacCount)> {
    if x.channels != spec.m {
        return Err(shape_err(
            "submanifold_conv",
            format!("input channels {} != spec m {}", x.channels, spec.m),
        ));
    }
    spec.check_params(k, b)?;
    let rb = x.sites.rulebook(spec.z);
    let out = submanifold_forward(&rb, x.sites.len(), &x.features, k.data(), b.data(), spec);
    let macs = submanifold_macs(&x.sites, &rb, spec);
    Ok((SparseFeatureMap::from_parts(spec.n, Arc::clone(&x.sites), out), macs))
}

/// 2×2/stride-2 max-pooling over active sites only. A pooled site is active
/// iff any site in its window is; inactive inputs never enter the max.
pub fn sparse_maxpool(x: &SparseFeatureMap) -> SparseFeatureMap {
    let (sites, children) = x.sites.pooled();
    let (out, _) = pool_forward(&x.features, x.channels, &children);
    SparseFeatureMap::from_parts(x.channels, Arc::new(sites), out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ops::conv2d;

    fn ramp(shape: Vec<usize>) -> Tensor {
        Tensor::from_fn(shape, |i| ((i * 7919) % 23) as f64 / 7.0 - 1.5)
    }

    #[test]
    fn to_sparse_identity_and_empty() {
        let d = ramp(vec![3, 2, 4, 4]);
        let full = to_sparse(&d, &BinaryMap::ones([2, 4, 4])).unwrap();
        assert_eq!(full.active_count(), 32);
        assert_eq!(full.densify(), d);
        let none = to_sparse(&d, &BinaryMap::zeros([2, 4, 4])).unwrap();
        assert_eq!(none.active_count(), 0);
        assert!(to_sparse(&d, &BinaryMap::ones([2, 4, 3])).is_err());
    }

    #[test]
    fn isolated_site_sees_only_center_tap() {
        let d = ramp(vec![2, 1, 5, 5]);
        let mut mask = BinaryMap::zeros([1, 5, 5]);
        mask.set(0, 2, 2, true);
        let x = to_sparse(&d, &mask).unwrap();
        let spec = ConvSpec::new(3, 2, 3).unwrap();
        let k = ramp(vec![3, 2, 3, 3]);
        let b = Tensor::new(vec![3], vec![0.1, -0.2, 0.3]).unwrap();
        let (y, macs) = submanifold_conv(&x, &spec, &k, &b).unwrap();
        assert_eq!(macs.executed, 2 * 3);
        assert_eq!(macs.dense, 9 * 2 * 3 * 25);
        for co in 0..3 {
            let expect = b.data()[co]
                + (0..2).map(|ci| k.at(&[co, ci, 1, 1]) * d.at(&[ci, 0, 2, 2])).sum::<f64>();
            assert!((y.feature(0)[co] - expect).abs() < 1e-14);
        }
    }

    #[test]
    fn five_active_neighbors_cost_40_macs() {
        // plus-shaped neighbourhood around (2,2): a = 5
        let mut mask = BinaryMap::zeros([1, 5, 5]);
        for (h, w) in [(2, 2), (1, 2), (3, 2), (2, 1), (2, 3)] {
            mask.set(0, h, w, true);
        }
        let sites = SiteSet::from_map(&mask);
        let rb = sites.rulebook(3);
        let center = sites.index_of(0, 2, 2).unwrap();
        assert_eq!(rb.active_neighbors[center], 5);
        let spec = ConvSpec::new(3, 2, 4).unwrap();
        assert_eq!(rb.active_neighbors[center] as usize * spec.m * spec.n, 40);
        assert_eq!(spec.z * spec.z * spec.m * spec.n, 72);
    }

    #[test]
    fn all_active_matches_dense_conv() {
        let d = ramp(vec![3, 2, 6, 5]);
        let k = ramp(vec![4, 3, 3, 3]);
        let b = Tensor::new(vec![4], vec![0.5, 0.0, -0.5, 1.0]).unwrap();
        let (dense, _) = conv2d(&d, &k, &b, 1).unwrap();
        let x = to_sparse(&d, &BinaryMap::ones([2, 6, 5])).unwrap();
        let (y, _) = submanifold_conv(&x, &ConvSpec::new(3, 3, 4).unwrap(), &k, &b).unwrap();
        assert!(y.densify().max_abs_diff(&dense) < 1e-12);
    }

    #[test]
    fn channel_mismatch_rejected() {
        let x = to_sparse(&ramp(vec![2, 1, 3, 3]), &BinaryMap::ones([1, 3, 3])).unwrap();
        let spec = ConvSpec::new(3, 3, 1).unwrap();
        assert!(submanifold_conv(&x, &spec, &Tensor::zeros(vec![1, 3, 3, 3]), &Tensor::zeros(vec![1])).is_err());
        assert!(ConvSpec::new(2, 1, 1).is_err());
    }

    #[test]
    fn pooling_ignores_inactive_sites() {
        let vals = vec![1.0, -2.0, 7.0, 9.0];
        let mut d = Tensor::zeros(vec![1, 1, 2, 2]);
        d.data_mut().copy_from_slice(&vals);
        let mut mask = BinaryMap::zeros([1, 2, 2]);
        mask.set(0, 0, 0, true);
        mask.set(0, 0, 1, true);
        let y = sparse_maxpool(&to_sparse(&d, &mask).unwrap());
        assert_eq!(y.active_count(), 1);
        assert_eq!(y.features(), &[1.0]);

        // all negative actives: the inactive zeros must not win
        let d = Tensor::new(vec![1, 1, 2, 2], vec![-3.0, -1.0, 0.0, 0.0]).unwrap();
        let y = sparse_maxpool(&to_sparse(&d, &mask).unwrap());
        assert_eq!(y.features(), &[-1.0]);
    }

    #[test]
    fn pooling_odd_extent_pads_high() {
        let d = ramp(vec![1, 1, 3, 3]);
        let y = sparse_maxpool(&to_sparse(&d, &BinaryMap::ones([1, 3, 3])).unwrap());
        assert_eq!(y.extents(), [1, 1, 2, 2]);
        assert_eq!(y.value_at(0, 0, 1, 1), d.at(&[0, 0, 2, 2]));
    }

    #[test]
    fn csv_dump_layout() {
        let d = Tensor::new(vec![2, 1, 1, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let mut mask = BinaryMap::zeros([1, 1, 2]);
        mask.set(0, 0, 1, true);
        let mut buf = Vec::new();
        to_sparse(&d, &mask).unwrap().write_csv(&mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "# C=2 S=1 H=1 W=2\ns,h,w,c0,c1\n0,0,1,2,4\n");
    }

    #[test]
    fn from_coords_validates() {
        assert!(SiteSet::from_coords([1, 2, 2], vec![[0, 2, 0]]).is_err());
        assert!(SiteSet::from_coords([1, 2, 2], vec![[0, 1, 0], [0, 1, 0]]).is_err());
        let s = SiteSet::from_coords([1, 2, 2], vec![[0, 1, 1], [0, 0, 1]]).unwrap();
        assert_eq!(s.coords(), &[[0, 0, 1], [0, 1, 1]]);
    }
}
