//! Closed-form hardware relations: thread-block candidate sets, the
//! shared-memory bound on k_chunk, the transfer knee point, GPU buffer
//! accounting, and a pluggable timing oracle (analytic or table-based).

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::selection::CHUNK;

/// Shared-memory footprint at k_chunk = 0: 32 bucket counters (128 B)
/// plus the chunk's fp16 activations (2048 B).
pub const MIN_SHARED_MEM_BYTES: usize = 128 + 2 * CHUNK;

/// Device description plus the two invented contention parameters of the
/// analytic model. `r_bw = mem_bw / pcie_bw` governs the knee point.
#[derive(Debug, Clone, PartialEq)]
pub struct HardwareProfile {
    pub name: String,
    /// GPU memory bandwidth, bytes/sec.
    pub mem_bw: f64,
    /// CPU-to-GPU interconnect bandwidth, bytes/sec.
    pub pcie_bw: f64,
    pub sm_count: usize,
    /// Per-block shared memory limit, bytes.
    pub shared_mem_bytes: usize,
    /// Thread blocks needed to saturate PCIe (n_sat).
    pub pcie_saturation_blocks: usize,
    /// Base-GEMV inflation factor per compensation thread block, in [0, 1).
    pub contention_alpha: f64,
}

impl HardwareProfile {
    pub fn validate(&self) -> Result<()> {
        if !(self.mem_bw > self.pcie_bw && self.pcie_bw > 0.0) {
            return Err(Error::Precondition(
                "require mem_bw > pcie_bw > 0".into(),
            ));
        }
        if self.sm_count == 0 {
            return Err(Error::Precondition("sm_count must be >= 1".into()));
        }
        if self.shared_mem_bytes < MIN_SHARED_MEM_BYTES {
            return Err(Error::Precondition(format!(
                "shared_mem_bytes {} below minimum footprint {}",
                self.shared_mem_bytes, MIN_SHARED_MEM_BYTES
            )));
        }
        if !(0.0..1.0).contains(&self.contention_alpha) {
            return Err(Error::Precondition(
                "contention_alpha must be in [0, 1)".into(),
            ));
        }
        Ok(())
    }

    pub fn r_bw(&self) -> f64 {
        self.mem_bw / self.pcie_bw
    }

    /// Parse a line-oriented `key = value` profile file. Bandwidths are
    /// given in GB/s (1e9 bytes).
    pub fn parse(text: &str) -> Result<Self> {
        let mut map = BTreeMap::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Parse(format!("line {}: expected 'key = value'", lineno + 1))
            })?;
            map.insert(key.trim().to_string(), value.trim().to_string());
        }
        let get = |key: &str| -> Result<&String> {
            map.get(key)
                .ok_or_else(|| Error::Parse(format!("missing key {key}")))
        };
        let num = |key: &str| -> Result<f64> {
            get(key)?
                .parse::<f64>()
                .map_err(|e| Error::Parse(format!("{key}: {e}")))
        };
        let profile = Self {
            name: get("name")?.clone(),
            mem_bw: num("mem_bw_gbps")? * 1e9,
            pcie_bw: num("pcie_bw_gbps")? * 1e9,
            sm_count: num("sm_count")? as usize,
            shared_mem_bytes: num("shared_mem_bytes")? as usize,
            pcie_saturation_blocks: num("pcie_saturation_blocks")? as usize,
            contention_alpha: num("contention_alpha")?,
        };
        profile.validate()?;
        Ok(profile)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }
}

/// One linear-layer class of the model (qkv / o / gu / d or custom).
#[derive(Debug, Clone, PartialEq)]
pub struct LayerShape {
    pub label: String,
    pub d_in: usize,
    pub d_out: usize,
    pub base_bits: u8,
    /// How many instances of this layer appear per decoder block.
    pub count_per_block: usize,
}

impl LayerShape {
    pub fn validate(&self) -> Result<()> {
        if self.d_in < 256 || self.d_out < 256 {
            return Err(Error::Precondition(format!(
                "{}: d_in and d_out must be >= 256",
                self.label
            )));
        }
        if self.d_out % 256 != 0 {
            return Err(Error::Precondition(format!(
                "{}: d_out must be divisible by 256",
                self.label
            )));
        }
        if !matches!(self.base_bits, 2 | 3 | 4) {
            return Err(Error::UnsupportedBits(self.base_bits));
        }
        Ok(())
    }

    pub fn weight_elems(&self) -> usize {
        self.d_in * self.d_out
    }
}

/// Layer classes plus the decoder-block count.
#[derive(Debug, Clone)]
pub struct ModelShapes {
    pub layers: Vec<LayerShape>,
    pub num_blocks: usize,
}

impl ModelShapes {
    /// Parse the model-shape file: a `num_blocks = <int>` line plus CSV
    /// rows `label,d_in,d_out,base_bits,count_per_block` (optional CSV
    /// header line).
    pub fn parse(text: &str) -> Result<Self> {
        let mut layers = Vec::new();
        let mut num_blocks = None;
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if let Some(rest) = line.strip_prefix("num_blocks") {
                let value = rest.trim_start().strip_prefix('=').ok_or_else(|| {
                    Error::Parse(format!("line {}: expected num_blocks = <int>", lineno + 1))
                })?;
                num_blocks = Some(
                    value
                        .trim()
                        .parse::<usize>()
                        .map_err(|e| Error::Parse(format!("num_blocks: {e}")))?,
                );
                continue;
            }
            if line.starts_with("label,") || line.starts_with("layer,") {
                continue; // CSV header
            }
            let fields: Vec<&str> = line.split(',').map(str::trim).collect();
            if fields.len() != 5 {
                return Err(Error::Parse(format!(
                    "line {}: expected 5 CSV fields, got {}",
                    lineno + 1,
                    fields.len()
                )));
            }
            let layer = LayerShape {
                label: fields[0].to_string(),
                d_in: fields[1]
                    .parse()
                    .map_err(|e| Error::Parse(format!("d_in: {e}")))?,
                d_out: fields[2]
                    .parse()
                    .map_err(|e| Error::Parse(format!("d_out: {e}")))?,
                base_bits: fields[3]
                    .parse()
                    .map_err(|e| Error::Parse(format!("base_bits: {e}")))?,
                count_per_block: fields[4]
                    .parse()
                    .map_err(|e| Error::Parse(format!("count_per_block: {e}")))?,
            };
            layer.validate()?;
            layers.push(layer);
        }
        let num_blocks =
            num_blocks.ok_or_else(|| Error::Parse("missing num_blocks line".into()))?;
        if layers.is_empty() {
            return Err(Error::Parse("no layer rows".into()));
        }
        Ok(Self { layers, num_blocks })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }
}

/// Thread-block counts worth testing for a layer: A covers the Top-K pass
/// (one chunk per block minimum), B the coalesced 256-value fetch
/// segments, deduplicated to the smallest n per distinct ceil(s/n).
pub fn candidate_ntb(d_in: usize, d_out: usize) -> Result<Vec<usize>> {
    if d_in < CHUNK {
        return Err(Error::Precondition(format!("d_in {d_in} < {CHUNK}")));
    }
    if d_out % 256 != 0 || d_out == 0 {
        return Err(Error::Precondition(format!(
            "d_out {d_out} not divisible by 256"
        )));
    }
    let mut set: Vec<usize> = (1..=d_in / CHUNK).collect();
    let s = d_out / 256;
    for n in 1..=s {
        let per_block = s.div_ceil(n);
        if s.div_ceil(per_block) == n {
            set.push(n);
        }
    }
    set.sort_unstable();
    set.dedup();
    Ok(set)
}

/// Largest k_chunk whose bucket-index staging fits per-block shared
/// memory: `128 + 128 * k_chunk + 2048 <= shared_mem_bytes`.
pub fn max_kchunk(shared_mem_bytes: usize) -> Result<usize> {
    if shared_mem_bytes < MIN_SHARED_MEM_BYTES {
        return Err(Error::Precondition(format!(
            "shared memory budget {} below minimum footprint {}",
            shared_mem_bytes, MIN_SHARED_MEM_BYTES
        )));
    }
    Ok((shared_mem_bytes - MIN_SHARED_MEM_BYTES) / 128)
}

/// Theoretical knee: `1024 * (1 / R_bw) * (base_bits / 4)` -- the largest
/// k_chunk whose 4-bit residual transfer still hides under the base GEMV.
pub fn knee_point(profile: &HardwareProfile, base_bits: u8) -> Result<f64> {
    if !matches!(base_bits, 2 | 3 | 4) {
        return Err(Error::UnsupportedBits(base_bits));
    }
    Ok(CHUNK as f64 / profile.r_bw() * base_bits as f64 / 4.0)
}

/// GPU-side staging buffer for selected indices and fp16 activation
/// values: 4 + 2 bytes per selected channel.
pub fn buffer_bytes(k_max: usize) -> usize {
    k_max * 6
}

/// Analytic kernel time; returns `(t_total, t_base)` in seconds.
///
/// Base GEMV reads the packed weight matrix at memory bandwidth. The
/// compensation path fetches `k` residual rows plus all scales over PCIe
/// (derated below `n_sat` blocks) and one activation-vector read for the
/// Top-K pass; contention inflates the base time only while compensation
/// runs. Total is the max of the two concurrent paths.
pub fn analytic_time(
    layer: &LayerShape,
    r_bits: u8,
    k_chunk: usize,
    n_tb: usize,
    profile: &HardwareProfile,
) -> Result<(f64, f64)> {
    if n_tb == 0 {
        return Err(Error::Precondition("n_tb must be >= 1".into()));
    }
    let t_base = layer.weight_elems() as f64 * layer.base_bits as f64 / 8.0 / profile.mem_bw;
    if k_chunk == 0 {
        return Ok((t_base, t_base));
    }
    if profile.contention_alpha * n_tb as f64 >= profile.sm_count as f64 {
        return Err(Error::Precondition(format!(
            "n_tb {} saturates the contention model (alpha {}, {} SMs)",
            n_tb, profile.contention_alpha, profile.sm_count
        )));
    }
    let num_chunks = layer.d_in as f64 / CHUNK as f64;
    let k = k_chunk as f64 * num_chunks;
    let fetch_bytes = k * layer.d_out as f64 * r_bits as f64 / 8.0 + 2.0 * layer.d_out as f64;
    let pcie_eff = profile.pcie_bw
        * (n_tb as f64 / profile.pcie_saturation_blocks as f64).min(1.0);
    let t_comp =
        fetch_bytes / pcie_eff + layer.d_in as f64 * 2.0 / profile.mem_bw;
    let t_base_contended =
        t_base / (1.0 - profile.contention_alpha * n_tb as f64 / profile.sm_count as f64);
    Ok((t_base_contended.max(t_comp), t_base))
}

/// Closed-form k_chunk where the compensation path overtakes the
/// (contended) base time in `analytic_time`; fractional.
pub fn analytic_knee_kchunk(
    layer: &LayerShape,
    r_bits: u8,
    n_tb: usize,
    profile: &HardwareProfile,
) -> Result<f64> {
    let (_, t_base) = analytic_time(layer, r_bits, 0, n_tb, profile)?;
    let t_base_contended =
        t_base / (1.0 - profile.contention_alpha * n_tb as f64 / profile.sm_count as f64);
    let pcie_eff = profile.pcie_bw
        * (n_tb as f64 / profile.pcie_saturation_blocks as f64).min(1.0);
    let fixed = 2.0 * layer.d_out as f64 / pcie_eff
        + layer.d_in as f64 * 2.0 / profile.mem_bw;
    let per_kchunk = (layer.d_in as f64 / CHUNK as f64) * layer.d_out as f64
        * r_bits as f64
        / 8.0
        / pcie_eff;
    Ok((t_base_contended - fixed) / per_kchunk)
}

/// The contract the tuner depends on: seconds for one invocation of a
/// layer's fused kernel at the given parameters.
pub trait TimingOracle {
    fn time(&self, layer: &LayerShape, n_tb: usize, k_chunk: usize) -> Result<f64>;
}

/// Oracle backed by `analytic_time` with a fixed residual bitwidth.
#[derive(Debug, Clone)]
pub struct AnalyticOracle {
    pub profile: HardwareProfile,
    pub r_bits: u8,
}

impl TimingOracle for AnalyticOracle {
    fn time(&self, layer: &LayerShape, n_tb: usize, k_chunk: usize) -> Result<f64> {
        analytic_time(layer, self.r_bits, k_chunk, n_tb, &self.profile).map(|(t, _)| t)
    }
}

/// Oracle backed by measured timings, interpolating linearly between
/// k_chunk grid points within each (layer, n_tb) series.
#[derive(Debug, Clone)]
pub struct TableOracle {
    // (label, n_tb) -> sorted (k_chunk, seconds)
    series: BTreeMap<(String, usize), Vec<(usize, f64)>>,
}

impl TableOracle {
    pub fn from_rows(rows: &[(String, usize, usize, f64)]) -> Result<Self> {
        let mut series: BTreeMap<(String, usize), Vec<(usize, f64)>> = BTreeMap::new();
        for (label, n_tb, k_chunk, seconds) in rows {
            series
                .entry((label.clone(), *n_tb))
                .or_default()
                .push((*k_chunk, *seconds));
        }
        for ((label, n_tb), points) in series.iter_mut() {
            points.sort_by_key(|p| p.0);
            if points.windows(2).any(|w| w[0].0 == w[1].0) {
                return Err(Error::Parse(format!(
                    "duplicate k_chunk in series ({label}, {n_tb})"
                )));
            }
            if points[0].0 != 0 {
                return Err(Error::Parse(format!(
                    "series ({label}, {n_tb}) does not cover k_chunk = 0"
                )));
            }
            if points.windows(2).any(|w| w[1].1 < w[0].1) {
                return Err(Error::Parse(format!(
                    "series ({label}, {n_tb}) is not non-decreasing in k_chunk"
                )));
            }
        }
        if series.is_empty() {
            return Err(Error::Parse("empty timing table".into()));
        }
        Ok(Self { series })
    }

    /// Parse CSV `layer,n_tb,k_chunk,micros` (optional header).
    pub fn parse(text: &str) -> Result<Self> {
        let mut rows = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') || line.starts_with("layer,") {
                continue;
            }
            let fields: Vec<&str> = line.split(',').map(str::trim).collect();
            if fields.len() != 4 {
                return Err(Error::Parse(format!(
                    "line {}: expected 4 CSV fields",
                    lineno + 1
                )));
            }
            let micros: f64 = fields[3]
                .parse()
                .map_err(|e| Error::Parse(format!("micros: {e}")))?;
            rows.push((
                fields[0].to_string(),
                fields[1]
                    .parse()
                    .map_err(|e| Error::Parse(format!("n_tb: {e}")))?,
                fields[2]
                    .parse()
                    .map_err(|e| Error::Parse(format!("k_chunk: {e}")))?,
                micros * 1e-6,
            ));
        }
        Self::from_rows(&rows)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }
}

impl TimingOracle for TableOracle {
    fn time(&self, layer: &LayerShape, n_tb: usize, k_chunk: usize) -> Result<f64> {
        let points = self
            .series
            .get(&(layer.label.clone(), n_tb))
            .ok_or_else(|| {
                Error::Precondition(format!(
                    "no timing series for ({}, n_tb = {n_tb})",
                    layer.label
                ))
            })?;
        if k_chunk > points.last().unwrap().0 {
            return Err(Error::Precondition(format!(
                "k_chunk {} beyond measured grid (max {}) for ({}, {})",
                k_chunk,
                points.last().unwrap().0,
                layer.label,
                n_tb
            )));
        }
        match points.binary_search_by_key(&k_chunk, |p| p.0) {
            Ok(i) => Ok(points[i].1),
            Err(i) => {
                let (k0, t0) = points[i - 1];
                let (k1, t1) = points[i];
                let frac = (k_chunk - k0) as f64 / (k1 - k0) as f64;
                Ok(t0 + frac * (t1 - t0))
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn profile(mem_gbps: f64, pcie_gbps: f64, sm: usize, alpha: f64, n_sat: usize) -> HardwareProfile {
        HardwareProfile {
            name: "test".into(),
            mem_bw: mem_gbps * 1e9,
            pcie_bw: pcie_gbps * 1e9,
            sm_count: sm,
            shared_mem_bytes: 49152,
            pcie_saturation_blocks: n_sat,
            contention_alpha: alpha,
        }
    }

    #[test]
    fn candidate_ntb_llama_qkv() {
        assert_eq!(
            candidate_ntb(4096, 6144).unwrap(),
            vec![1, 2, 3, 4, 5, 6, 8, 12, 24]
        );
    }

    #[test]
    fn candidate_ntb_minimal() {
        assert_eq!(candidate_ntb(1024, 256).unwrap(), vec![1]);
    }

    #[test]
    fn candidate_ntb_down_proj() {
        // brute-force B over n in 1..=16 gives {1,2,3,4,6,8,16}
        let mut expected: Vec<usize> = (1..=14).collect();
        expected.push(16);
        assert_eq!(candidate_ntb(14336, 4096).unwrap(), expected);
    }

    #[test]
    fn candidate_ntb_b_set_matches_bruteforce() {
        for d_out in [256usize, 1024, 4096, 6144, 28672] {
            let s = d_out / 256;
            let got = candidate_ntb(1024, d_out).unwrap();
            let brute: Vec<usize> = (1..=s)
                .filter(|&n| s.div_ceil(s.div_ceil(n)) == n)
                .collect();
            let mut expected = brute;
            if !expected.contains(&1) {
                expected.push(1);
            }
            expected.sort_unstable();
            expected.dedup();
            assert_eq!(got, expected, "d_out = {d_out}");
        }
    }

    #[test]
    fn candidate_ntb_preconditions() {
        assert!(candidate_ntb(512, 256).is_err());
        assert!(candidate_ntb(1024, 300).is_err());
    }

    #[test]
    fn max_kchunk_values() {
        assert_eq!(max_kchunk(49152).unwrap(), 367);
        assert_eq!(max_kchunk(2176).unwrap(), 0);
        assert_eq!(max_kchunk(65536).unwrap(), 495);
        assert!(max_kchunk(2175).is_err());
    }

    #[test]
    fn max_kchunk_step_property() {
        for x in (2176..8000).step_by(17) {
            let a = max_kchunk(x).unwrap();
            let b = max_kchunk(x + 128).unwrap();
            assert!(b == a || b == a + 1);
        }
    }

    #[test]
    fn knee_point_values() {
        let p4050 = profile(192.0, 16.0, 20, 0.0, 8); // R_bw = 12
        assert_eq!(knee_point(&p4050, 3).unwrap(), 64.0);
        let p4090 = profile(1008.0, 31.5, 128, 0.0, 8); // R_bw = 32
        assert_eq!(knee_point(&p4090, 3).unwrap(), 24.0);
        let p16 = profile(512.0, 32.0, 56, 0.0, 8); // R_bw = 16
        assert_eq!(knee_point(&p16, 4).unwrap(), 64.0);
    }

    #[test]
    fn knee_point_monotonicity() {
        let lo = profile(192.0, 16.0, 20, 0.0, 8);
        let hi = profile(384.0, 16.0, 20, 0.0, 8);
        assert!(knee_point(&hi, 3).unwrap() < knee_point(&lo, 3).unwrap());
        assert!(knee_point(&lo, 4).unwrap() > knee_point(&lo, 3).unwrap());
        assert!(knee_point(&lo, 3).unwrap() > knee_point(&lo, 2).unwrap());
    }

    #[test]
    fn buffer_bytes_values() {
        assert_eq!(buffer_bytes(1433), 8598);
        assert_eq!(buffer_bytes(0), 0);
        assert_eq!(buffer_bytes(128), 768);
    }

    #[test]
    fn analytic_time_kchunk_zero_is_base() {
        let p = profile(192.0, 16.0, 20, 0.2, 8);
        let layer = LayerShape {
            label: "gu".into(),
            d_in: 4096,
            d_out: 28672,
            base_bits: 3,
            count_per_block: 1,
        };
        let (t, t_base) = analytic_time(&layer, 4, 0, 8, &p).unwrap();
        assert_eq!(t, t_base);
        let expected = 4096.0 * 28672.0 * 3.0 / 8.0 / 192e9;
        assert!((t_base - expected).abs() / expected < 1e-12);
    }

    #[test]
    fn analytic_time_reproduces_its_own_knee() {
        // alpha = 0, n_tb >= n_sat, scale bytes <= 2% of fetch: at the
        // theoretical knee the two branches nearly coincide
        let p = profile(192.0, 16.0, 20, 0.0, 8);
        let layer = LayerShape {
            label: "gu".into(),
            d_in: 4096,
            d_out: 28672,
            base_bits: 3,
            count_per_block: 1,
        };
        let knee = knee_point(&p, 3).unwrap() as usize; // 64
        let k = knee as f64 * 4.0;
        let fetch = k * 28672.0 * 0.5;
        assert!(2.0 * 28672.0 <= 0.02 * fetch);
        let (t, t_base) = analytic_time(&layer, 4, knee, 8, &p).unwrap();
        let ratio = t / t_base;
        assert!((0.99..=1.02).contains(&ratio), "ratio {ratio}");
    }

    #[test]
    fn analytic_time_flat_then_increasing() {
        let p = profile(192.0, 16.0, 20, 0.0, 8);
        let layer = LayerShape {
            label: "gu".into(),
            d_in: 4096,
            d_out: 28672,
            base_bits: 3,
            count_per_block: 1,
        };
        let knee = analytic_knee_kchunk(&layer, 4, 8, &p).unwrap();
        let flat_limit = knee.floor() as usize;
        let (t0, t_base) = analytic_time(&layer, 4, 0, 8, &p).unwrap();
        assert_eq!(t0, t_base);
        for k in 1..=flat_limit {
            let (t, _) = analytic_time(&layer, 4, k, 8, &p).unwrap();
            assert_eq!(t, t_base, "k_chunk {k} not flat");
        }
        let mut prev = t_base;
        for k in flat_limit + 1..flat_limit + 20 {
            let (t, _) = analytic_time(&layer, 4, k, 8, &p).unwrap();
            assert!(t > prev, "k_chunk {k} not strictly increasing");
            prev = t;
        }
    }

    #[test]
    fn analytic_time_monotone_in_kchunk() {
        let p = profile(504.0, 32.0, 56, 0.2, 8);
        let layer = LayerShape {
            label: "o".into(),
            d_in: 4096,
            d_out: 4096,
            base_bits: 3,
            count_per_block: 1,
        };
        let mut prev = 0.0;
        for k in 0..200 {
            let (t, _) = analytic_time(&layer, 4, k, 8, &p).unwrap();
            assert!(t >= prev);
            prev = t;
        }
    }

    #[test]
    fn analytic_time_contention_denominator_guard() {
        let p = profile(192.0, 16.0, 4, 0.9, 8);
        let layer = LayerShape {
            label: "o".into(),
            d_in: 4096,
            d_out: 4096,
            base_bits: 3,
            count_per_block: 1,
        };
        assert!(analytic_time(&layer, 4, 8, 5, &p).is_err());
    }

    #[test]
    fn table_oracle_interpolation() {
        let oracle = TableOracle::from_rows(&[
            ("d".into(), 8, 0, 100e-6),
            ("d".into(), 8, 64, 100e-6),
            ("d".into(), 8, 128, 150e-6),
        ])
        .unwrap();
        let layer = LayerShape {
            label: "d".into(),
            d_in: 14336,
            d_out: 4096,
            base_bits: 3,
            count_per_block: 1,
        };
        let t = oracle.time(&layer, 8, 96).unwrap();
        assert!((t - 125e-6).abs() < 1e-12);
        assert!((oracle.time(&layer, 8, 0).unwrap() - 100e-6).abs() < 1e-15);
        assert!(oracle.time(&layer, 8, 129).is_err());
        assert!(oracle.time(&layer, 4, 0).is_err());
    }

    #[test]
    fn table_oracle_rejects_bad_series() {
        // non-monotone
        assert!(TableOracle::from_rows(&[
            ("d".into(), 8, 0, 100e-6),
            ("d".into(), 8, 64, 90e-6),
        ])
        .is_err());
        // missing k_chunk = 0
        assert!(TableOracle::from_rows(&[("d".into(), 8, 8, 100e-6)]).is_err());
    }

    #[test]
    fn table_oracle_reproduces_analytic_grid() {
        let p = profile(192.0, 16.0, 20, 0.0, 8);
        let layer = LayerShape {
            label: "gu".into(),
            d_in: 4096,
            d_out: 28672,
            base_bits: 3,
            count_per_block: 1,
        };
        let grid: Vec<usize> = (0..=128).step_by(8).collect();
        let rows: Vec<(String, usize, usize, f64)> = grid
            .iter()
            .map(|&k| {
                let (t, _) = analytic_time(&layer, 4, k, 8, &p).unwrap();
                ("gu".to_string(), 8, k, t)
            })
            .collect();
        let oracle = TableOracle::from_rows(&rows).unwrap();
        for &k in &grid {
            let (t, _) = analytic_time(&layer, 4, k, 8, &p).unwrap();
            assert!((oracle.time(&layer, 8, k).unwrap() - t).abs() < 1e-9);
        }
    }

    #[test]
    fn profile_parse_roundtrip() {
        let text = "name = rtx4050m\nmem_bw_gbps = 192\npcie_bw_gbps = 16\nsm_count = 20\nshared_mem_bytes = 49152\npcie_saturation_blocks = 8\ncontention_alpha = 0.2\n";
        let p = HardwareProfile::parse(text).unwrap();
        assert_eq!(p.name, "rtx4050m");
        assert_eq!(p.r_bw(), 12.0);
        assert_eq!(p.sm_count, 20);
    }

    #[test]
    fn model_shapes_parse() {
        let text = "num_blocks = 32\nlabel,d_in,d_out,base_bits,count_per_block\nqkv,4096,6144,3,1\no,4096,4096,3,1\n";
        let m = ModelShapes::parse(text).unwrap();
        assert_eq!(m.num_blocks, 32);
        assert_eq!(m.layers.len(), 2);
        assert_eq!(m.layers[0].label, "qkv");
    }
}
