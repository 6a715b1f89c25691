//! Matrix-free degradation operators and noise simulation.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::partition::Partition;

/// Square convolution kernel, row-major, centred at `(k/2, k/2)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Kernel {
    pub size: usize,
    pub values: Vec<f64>,
}

impl Kernel {
    pub fn new(size: usize, values: Vec<f64>) -> Result<Self> {
        if size == 0 {
            return Err(Error::invalid("kernel size must be positive"));
        }
        Error::check_len(size * size, values.len())?;
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("kernel entries must be finite"));
        }
        Ok(Self { size, values })
    }

    pub fn uniform(size: usize) -> Result<Self> {
        Self::new(size, vec![1.0 / (size * size) as f64; size * size])
    }

    pub fn gaussian(size: usize, sigma: f64) -> Result<Self> {
        if !(sigma > 0.0) {
            return Err(Error::invalid("blur width must be positive"));
        }
        let c = (size / 2) as f64;
        let mut v: Vec<f64> = (0..size * size)
            .map(|i| {
                let (dy, dx) = ((i / size) as f64 - c, (i % size) as f64 - c);
                (-(dx * dx + dy * dy) / (2.0 * sigma * sigma)).exp()
            })
            .collect();
        let s: f64 = v.iter().sum();
        v.iter_mut().for_each(|x| *x /= s);
        Self::new(size, v)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut tokens = text.split_whitespace();
        let size: usize = tokens
            .next()
            .and_then(|t| t.parse().ok())
            .ok_or_else(|| Error::Format("kernel file must start with its size".into()))?;
        let values = tokens
            .map(|t| t.parse::<f64>().map_err(|_| Error::Format(format!("bad kernel entry {t:?}"))))
            .collect::<Result<Vec<_>>>()?;
        if values.len() != size * size {
            return Err(Error::Format(format!("kernel has {} entries, expected {}", values.len(), size * size)));
        }
        Self::new(size, values).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&fs::read_to_string(path)?)
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("{}\n", self.size);
        for row in self.values.chunks(self.size) {
            let line: Vec<String> = row.iter().map(|v| format!("{v:e}")).collect();
            s.push_str(&line.join(" "));
            s.push('\n');
        }
        s
    }

    /// `(offset_row, offset_col, value)` for every nonzero tap; `(Hx)[n] = Σ v · x[n − offset]`.
    fn taps(&self) -> Vec<(isize, isize, f64)> {
        let c = (self.size / 2) as isize;
        (0..self.size * self.size)
            .filter(|&i| self.values[i] != 0.0)
            .map(|i| ((i / self.size) as isize - c, (i % self.size) as isize - c, self.values[i]))
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum OperatorSpec {
    Identity,
    Mask { kept: Vec<bool> },
    Conv2d { kernel: Kernel },
}

/// Degradation `H` acting on row-major `width × height` images.
#[derive(Clone, Debug, PartialEq)]
pub struct DegradationOperator {
    width: usize,
    height: usize,
    spec: OperatorSpec,
    taps: Vec<(isize, isize, f64)>,
}

impl DegradationOperator {
    pub fn identity(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            spec: OperatorSpec::Identity,
            taps: Vec::new(),
        }
    }

    pub fn mask(width: usize, height: usize, kept: Vec<bool>) -> Result<Self> {
        Error::check_len(width * height, kept.len())?;
        Ok(Self {
            width,
            height,
            spec: OperatorSpec::Mask { kept },
            taps: Vec::new(),
        })
    }

    pub fn conv2d(width: usize, height: usize, kernel: Kernel) -> Result<Self> {
        let taps = kernel.taps();
        Ok(Self {
            width,
            height,
            spec: OperatorSpec::Conv2d { kernel },
            taps,
        })
    }

    pub fn from_spec(width: usize, height: usize, spec: OperatorSpec) -> Result<Self> {
        match spec {
            OperatorSpec::Identity => Ok(Self::identity(width, height)),
            OperatorSpec::Mask { kept } => Self::mask(width, height, kept),
            OperatorSpec::Conv2d { kernel } => {
                let k = Kernel::new(kernel.size, kernel.values)?;
                Self::conv2d(width, height, k)
            }
        }
    }

    /// Mask from a PGM in which zero marks a missing pixel.
    pub fn read_mask(path: impl AsRef<Path>) -> Result<Self> {
        let (img, _) = Image::read_pgm(path)?;
        let kept = img.data().iter().map(|&v| v != 0.0).collect();
        Self::mask(img.width(), img.height(), kept)
    }

    /// Random mask keeping each pixel with probability `1 − missing`.
    pub fn random_mask(width: usize, height: usize, missing: f64, seed: u64) -> Result<Self> {
        if !(0.0..1.0).contains(&missing) {
            return Err(Error::invalid("missing fraction must lie in [0, 1)"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let kept = (0..width * height).map(|_| rand::Rng::random::<f64>(&mut rng) >= missing).collect();
        Self::mask(width, height, kept)
    }

    pub fn spec(&self) -> &OperatorSpec {
        &self.spec
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn len(&self) -> usize {
        self.width * self.height
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_diagonal(&self) -> bool {
        !matches!(self.spec, OperatorSpec::Conv2d { .. })
    }

    /// Diagonal of `H` when `H` is diagonal.
    pub fn diagonal(&self) -> Option<Vec<f64>> {
        match &self.spec {
            OperatorSpec::Identity => Some(vec![1.0; self.len()]),
            OperatorSpec::Mask { kept } => Some(kept.iter().map(|&k| if k { 1.0 } else { 0.0 }).collect()),
            OperatorSpec::Conv2d { .. } => None,
        }
    }

    pub fn kernel_nonnegative(&self) -> bool {
        match &self.spec {
            OperatorSpec::Conv2d { kernel } => kernel.values.iter().all(|&v| v >= 0.0),
            _ => true,
        }
    }

    #[inline]
    fn shifted(&self, n: usize, dr: isize, dc: isize) -> usize {
        let (h, w) = (self.height as isize, self.width as isize);
        let r = (n / self.width) as isize;
        let c = (n % self.width) as isize;
        ((r + dr).rem_euclid(h) * w + (c + dc).rem_euclid(w)) as usize
    }

    pub fn apply(&self, x: &[f64]) -> Result<Vec<f64>> {
        Error::check_len(self.len(), x.len())?;
        Ok(match &self.spec {
            OperatorSpec::Identity => x.to_vec(),
            OperatorSpec::Mask { kept } => x.iter().zip(kept).map(|(v, &k)| if k { *v } else { 0.0 }).collect(),
            OperatorSpec::Conv2d { .. } => self.circular(x, -1),
        })
    }

    /// `out[n] = Σ_taps v · x[n shifted by sign·(dr, dc)]` with periodic wrap.
    fn circular(&self, x: &[f64], sign: isize) -> Vec<f64> {
        let (h, w) = (self.height as isize, self.width as isize);
        let mut out = vec![0.0; x.len()];
        let mut cols = vec![0usize; self.width];
        for &(dr, dc, v) in &self.taps {
            let (dr, dc) = (sign * dr, sign * dc);
            for (c, col) in cols.iter_mut().enumerate() {
                *col = (c as isize + dc).rem_euclid(w) as usize;
            }
            for r in 0..h {
                let src = &x[((r + dr).rem_euclid(h) * w) as usize..][..self.width];
                let dst = &mut out[(r * w) as usize..][..self.width];
                for (o, &c) in dst.iter_mut().zip(&cols) {
                    *o += v * src[c];
                }
            }
        }
        out
    }

    pub fn apply_adjoint(&self, v: &[f64]) -> Result<Vec<f64>> {
        Error::check_len(self.len(), v.len())?;
        Ok(match &self.spec {
            OperatorSpec::Conv2d { .. } => self.circular(v, 1),
            _ => self.apply(v)?,
        })
    }

    /// Nonzeros `(column, value)` of row `n`, duplicates merged.
    pub fn row(&self, n: usize) -> Result<Vec<(usize, f64)>> {
        if n >= self.len() {
            return Err(Error::IndexOutOfRange { index: n, len: self.len() });
        }
        Ok(match &self.spec {
            OperatorSpec::Identity => vec![(n, 1.0)],
            OperatorSpec::Mask { kept } => {
                if kept[n] {
                    vec![(n, 1.0)]
                } else {
                    Vec::new()
                }
            }
            OperatorSpec::Conv2d { .. } => {
                let mut acc: BTreeMap<usize, f64> = BTreeMap::new();
                for &(dr, dc, v) in &self.taps {
                    *acc.entry(self.shifted(n, -dr, -dc)).or_insert(0.0) += v;
                }
                acc.into_iter().filter(|(_, v)| *v != 0.0).collect()
            }
        })
    }

    /// Nonzeros `(row, value)` of column `a`, duplicates merged.
    pub fn column(&self, a: usize) -> Result<Vec<(usize, f64)>> {
        if a >= self.len() {
            return Err(Error::IndexOutOfRange { index: a, len: self.len() });
        }
        Ok(match &self.spec {
            OperatorSpec::Conv2d { .. } => {
                let mut acc: BTreeMap<usize, f64> = BTreeMap::new();
                for &(dr, dc, v) in &self.taps {
                    *acc.entry(self.shifted(a, dr, dc)).or_insert(0.0) += v;
                }
                acc.into_iter().filter(|(_, v)| *v != 0.0).collect()
            }
            _ => self.row(a)?,
        })
    }

    pub fn row_dot(&self, n: usize, m: &[f64]) -> Result<f64> {
        Error::check_len(self.len(), m.len())?;
        Ok(self.row(n)?.iter().map(|&(a, v)| v * m[a]).sum())
    }

    /// `h_n Σ h_nᵀ` for a covariance given as blocks aligned with `partition`.
    pub fn row_quadratic_form(&self, n: usize, partition: &Partition, blocks: &[DMatrix<f64>]) -> Result<f64> {
        Error::check_len(self.len(), partition.pixel_count())?;
        Error::check_len(partition.num_blocks(), blocks.len())?;
        let row = self.row(n)?;
        let mut by_block: BTreeMap<usize, Vec<(usize, f64)>> = BTreeMap::new();
        for (a, v) in row {
            let (b, k) = partition.owner(a);
            by_block.entry(b).or_default().push((k, v));
        }
        let mut total = 0.0;
        for (b, entries) in by_block {
            let m = &blocks[b];
            for &(i, vi) in &entries {
                for &(j, vj) in &entries {
                    total += vi * vj * m[(i, j)];
                }
            }
        }
        Ok(total)
    }

    /// `h_n Σ h_nᵀ` for a diagonal covariance.
    pub fn row_quadratic_form_diag(&self, n: usize, variances: &[f64]) -> Result<f64> {
        Error::check_len(self.len(), variances.len())?;
        Ok(self.row(n)?.iter().map(|&(a, v)| v * v * variances[a]).sum())
    }

    /// `(Hᵀ W H)` restricted to the pixels in `indices`, with `W = diag(weights)`.
    pub fn weighted_gram_block(&self, indices: &[usize], weights: &[f64]) -> Result<DMatrix<f64>> {
        Error::check_len(self.len(), weights.len())?;
        let r = indices.len();
        let mut rows: BTreeMap<usize, Vec<(usize, f64)>> = BTreeMap::new();
        for (p, &a) in indices.iter().enumerate() {
            for (n, v) in self.column(a)? {
                rows.entry(n).or_default().push((p, v));
            }
        }
        let mut g = DMatrix::zeros(r, r);
        for (n, entries) in rows {
            let w = weights[n];
            for &(i, vi) in &entries {
                for &(j, vj) in &entries {
                    g[(i, j)] += w * vi * vj;
                }
            }
        }
        Ok(g)
    }

    /// Dense `N × N` matrix; only for small test problems.
    pub fn to_dense(&self) -> Result<DMatrix<f64>> {
        let n = self.len();
        if n > 4096 {
            return Err(Error::invalid("dense operator limited to 4096 pixels"));
        }
        let mut h = DMatrix::zeros(n, n);
        for i in 0..n {
            for (a, v) in self.row(i)? {
                h[(i, a)] += v;
            }
        }
        Ok(h)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum NoiseModel {
    Gaussian { variance: f64 },
    Poisson,
}

impl NoiseModel {
    pub fn validate(&self) -> Result<()> {
        match self {
            NoiseModel::Gaussian { variance } if !(*variance > 0.0 && variance.is_finite()) => {
                Err(Error::invalid("noise variance must be positive"))
            }
            _ => Ok(()),
        }
    }
}

/// `y = Hx + noise`, reproducible for a given seed.
pub fn simulate(h: &DegradationOperator, x: &[f64], noise: NoiseModel, seed: u64) -> Result<Vec<f64>> {
    noise.validate()?;
    let hx = h.apply(x)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    match noise {
        NoiseModel::Gaussian { variance } => {
            let s = variance.sqrt();
            Ok(hx
                .iter()
                .map(|&m| {
                    let e: f64 = StandardNormal.sample(&mut rng);
                    m + s * e
                })
                .collect())
        }
        NoiseModel::Poisson => hx
            .iter()
            .map(|&rate| {
                if !(rate >= 0.0) {
                    return Err(Error::invalid(format!("negative Poisson rate {rate}")));
                }
                if rate == 0.0 {
                    return Ok(0.0);
                }
                let d = Poisson::new(rate).map_err(|e| Error::invalid(e.to_string()))?;
                Ok(d.sample(&mut rng))
            })
            .collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unit_kernel_is_identity() {
        let h = DegradationOperator::conv2d(5, 4, Kernel::new(1, vec![1.0]).unwrap()).unwrap();
        let x: Vec<f64> = (0..20).map(|i| i as f64).collect();
        assert_eq!(h.apply(&x).unwrap(), x);
        assert_eq!(h.apply_adjoint(&x).unwrap(), x);
    }

    #[test]
    fn shift_kernel_moves_pixels() {
        // tap at offset (0, +1): (Hx)[r, c] = x[r, c − 1]
        let k = Kernel::new(3, vec![0.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0]).unwrap();
        let h = DegradationOperator::conv2d(3, 1, k).unwrap();
        assert_eq!(h.apply(&[1.0, 2.0, 3.0]).unwrap(), vec![3.0, 1.0, 2.0]);
    }

    #[test]
    fn mask_rows() {
        let h = DegradationOperator::mask(2, 1, vec![true, false]).unwrap();
        assert_eq!(h.row(1).unwrap(), vec![]);
        assert_eq!(h.row_quadratic_form_diag(1, &[3.0, 4.0]).unwrap(), 0.0);
        assert_eq!(h.row_quadratic_form_diag(0, &[3.0, 4.0]).unwrap(), 3.0);
    }

    #[test]
    fn kernel_text_roundtrip() {
        let k = Kernel::gaussian(3, 0.8).unwrap();
        assert_eq!(Kernel::parse(&k.to_text()).unwrap(), k);
        assert!(Kernel::parse("2\n1 2 3").is_err());
    }

    #[test]
    fn poisson_zero_rate_gives_zero() {
        let h = DegradationOperator::identity(3, 1);
        assert_eq!(simulate(&h, &[0.0; 3], NoiseModel::Poisson, 1).unwrap(), vec![0.0; 3]);
        assert!(simulate(&h, &[-1.0, 0.0, 0.0], NoiseModel::Poisson, 1).is_err());
    }
}
