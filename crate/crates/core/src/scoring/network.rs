//! Small convolutional similarity network.
//!
//! Input planes are `[F²ᵈ | F̃ | W²ᵈ | W̃]` (`2f + 2` channels, H × W). Each
//! layer is a 3×3, stride 1, zero-padded convolution followed by a leaky
//! ReLU; a global average pool and an affine head reduce the last layer to a
//! scalar score. Gradients are hand-derived.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::costvolume::CostVolumeUnit;
use crate::error::{invalid, Error, Result};
use crate::tensor_io::{load_tensors, save_tensors, Tensor};

pub const LEAKY_SLOPE: f64 = 0.1;
const KERNEL: usize = 3;
const FORMAT_VERSION: f64 = 1.0;

#[inline]
fn leaky(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        LEAKY_SLOPE * x
    }
}

#[inline]
fn leaky_grad(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else {
        LEAKY_SLOPE
    }
}

/// One 3×3 convolution; kernel layout `[out][in][ky][kx]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: Vec<f64>,
    pub bias: Vec<f64>,
}

impl ConvLayer {
    fn kernel_len(&self) -> usize {
        self.out_channels * self.in_channels * KERNEL * KERNEL
    }

    #[inline]
    fn weight_index(&self, o: usize, i: usize, ky: usize, kx: usize) -> usize {
        ((o * self.in_channels + i) * KERNEL + ky) * KERNEL + kx
    }
}

/// Architecture of the scorer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScorerArch {
    /// Output channels of each conv layer; the depth is `widths.len()`.
    pub widths: Vec<usize>,
}

impl Default for ScorerArch {
    fn default() -> Self {
        Self {
            widths: vec![32, 32, 16, 8],
        }
    }
}

/// Parameters of the similarity network.
#[derive(Debug, Clone, PartialEq)]
pub struct ScorerParams {
    pub layers: Vec<ConvLayer>,
    pub head_weights: Vec<f64>,
    pub head_bias: f64,
}

/// Activations kept from the forward pass for back-propagation.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    height: usize,
    width: usize,
    /// Zero-padded input to each layer (layer 0 gets the network input).
    inputs: Vec<Vec<f64>>,
    /// Pre-activation output of each layer, wide layout.
    pre: Vec<Vec<f64>>,
    pooled: Vec<f64>,
}

/// Builds the `2f + 2` input planes of a unit, channel-major.
pub fn unit_input(unit: &CostVolumeUnit<'_>) -> Vec<f64> {
    let (h, w, f) = (unit.height(), unit.width(), unit.dim());
    let hw = h * w;
    let mut x = vec![0.0; (2 * f + 2) * hw];
    let f2d = unit.image_features();
    for p in 0..hw {
        for (c, &val) in f2d.pixel(p).iter().enumerate() {
            x[c * hw + p] = val;
        }
    }
    for (p, row) in unit.aggregated().occupied_features() {
        for (c, &val) in row.iter().enumerate() {
            x[(f + c) * hw + p] = val;
        }
    }
    x[2 * f * hw..(2 * f + 1) * hw].copy_from_slice(unit.image_weights().values());
    x[(2 * f + 1) * hw..].copy_from_slice(unit.aggregated().weights());
    x
}

// Planes are stored zero-padded, `(h + 2) × (w + 2)`. Outputs use the padded
// row stride without the border rows ("wide" layout, `h × (w + 2)`): output
// `(y, x)` sits at `y·(w + 2) + x` and reads padded input at that index plus
// `ky·(w + 2) + kx`, so every kernel tap is one contiguous run. The last two
// columns of each wide row are scratch and never read back.

fn pad(x: &[f64], channels: usize, h: usize, w: usize) -> Vec<f64> {
    let (hw, w2) = (h * w, w + 2);
    let mut out = vec![0.0; channels * (h + 2) * w2];
    for c in 0..channels {
        for y in 0..h {
            let dst = c * (h + 2) * w2 + (y + 1) * w2 + 1;
            out[dst..dst + w].copy_from_slice(&x[c * hw + y * w..c * hw + (y + 1) * w]);
        }
    }
    out
}

/// Padded planes of `f(wide)`, dropping the scratch columns.
fn pad_wide(wide: &[f64], channels: usize, h: usize, w: usize, f: impl Fn(f64) -> f64) -> Vec<f64> {
    let w2 = w + 2;
    let mut out = vec![0.0; channels * (h + 2) * w2];
    for c in 0..channels {
        for y in 0..h {
            let src = &wide[c * h * w2 + y * w2..c * h * w2 + y * w2 + w];
            let dst = c * (h + 2) * w2 + (y + 1) * w2 + 1;
            for (d, &v) in out[dst..dst + w].iter_mut().zip(src) {
                *d = f(v);
            }
        }
    }
    out
}

/// Kernel-tap offsets into a padded plane of row stride `w2`.
fn tap_shifts(w2: usize) -> [usize; 9] {
    let mut s = [0; 9];
    for (t, v) in s.iter_mut().enumerate() {
        *v = (t / KERNEL) * w2 + t % KERNEL;
    }
    s
}

/// `dst[j] += Σ_t k[t]·src[j + shift[t]]` for `j < dst.len()`.
#[inline]
fn correlate_add(dst: &mut [f64], src: &[f64], k: &[f64], shift: &[usize; 9]) {
    let n = dst.len();
    let s: [&[f64]; 9] = std::array::from_fn(|t| &src[shift[t]..shift[t] + n]);
    for (j, d) in dst.iter_mut().enumerate() {
        let mut acc = *d;
        for t in 0..9 {
            acc += k[t] * s[t][j];
        }
        *d = acc;
    }
}

/// `z[o] = b[o] + Σ_i K[o,i] ⋆ input[i]`, padded input, wide output.
fn conv_forward(layer: &ConvLayer, padded: &[f64], h: usize, w: usize) -> Vec<f64> {
    let w2 = w + 2;
    let (plane_in, plane_out) = ((h + 2) * w2, h * w2);
    let run = plane_out - 2;
    let shift = tap_shifts(w2);
    let mut out = vec![0.0; layer.out_channels * plane_out];
    for o in 0..layer.out_channels {
        let dst = &mut out[o * plane_out..o * plane_out + run];
        dst.fill(layer.bias[o]);
        for i in 0..layer.in_channels {
            let k = &layer.kernel[layer.weight_index(o, i, 0, 0)..][..9];
            correlate_add(dst, &padded[i * plane_in..(i + 1) * plane_in], k, &shift);
        }
    }
    out
}

/// Gradients of one layer given `dz` (wide gradient w.r.t. pre-activation,
/// zero on scratch columns). Returns `(d_kernel, d_bias, d_padded_input)`;
/// the input gradient is skipped for layer 0.
fn conv_backward(
    layer: &ConvLayer,
    padded: &[f64],
    dz: &[f64],
    h: usize,
    w: usize,
    want_input_grad: bool,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let w2 = w + 2;
    let (plane_in, plane_out) = ((h + 2) * w2, h * w2);
    let run = plane_out - 2;
    let shift = tap_shifts(w2);
    let lead = 2 * w2 + 2;
    let mut dk = vec![0.0; layer.kernel_len()];
    let mut db = vec![0.0; layer.out_channels];
    let mut dx = if want_input_grad {
        vec![0.0; layer.in_channels * plane_in]
    } else {
        Vec::new()
    };
    // dz with `lead` zeros on both sides, so the input gradient is a plain
    // correlation with the flipped kernel.
    let mut gp = vec![0.0; run + 2 * lead];
    for o in 0..layer.out_channels {
        let g = &dz[o * plane_out..o * plane_out + run];
        db[o] = g.iter().sum();
        gp[lead..lead + run].copy_from_slice(g);
        for i in 0..layer.in_channels {
            let src = &padded[i * plane_in..(i + 1) * plane_in];
            let base = layer.weight_index(o, i, 0, 0);
            let s: [&[f64]; 9] = std::array::from_fn(|t| &src[shift[t]..shift[t] + run]);
            let mut acc = [0.0; 9];
            for (j, &gj) in g.iter().enumerate() {
                for t in 0..9 {
                    acc[t] += gj * s[t][j];
                }
            }
            dk[base..base + 9].copy_from_slice(&acc);
            if want_input_grad {
                let k = &layer.kernel[base..base + 9];
                let flipped: [f64; 9] = std::array::from_fn(|t| k[8 - t]);
                let back: [usize; 9] = std::array::from_fn(|t| lead - shift[8 - t]);
                correlate_add(&mut dx[i * plane_in..(i + 1) * plane_in], &gp, &flipped, &back);
            }
        }
    }
    (dk, db, dx)
}

/// Interior of padded planes in wide layout, zero on scratch columns.
fn unpad_to_wide(padded: &[f64], channels: usize, h: usize, w: usize) -> Vec<f64> {
    let w2 = w + 2;
    let mut out = vec![0.0; channels * h * w2];
    for c in 0..channels {
        for y in 0..h {
            let src = c * (h + 2) * w2 + (y + 1) * w2 + 1;
            let dst = c * h * w2 + y * w2;
            out[dst..dst + w].copy_from_slice(&padded[src..src + w]);
        }
    }
    out
}

impl ScorerParams {
    /// He-initialised parameters for `in_channels` input planes.
    pub fn random(in_channels: usize, arch: &ScorerArch, seed: u64) -> Result<Self> {
        if arch.widths.is_empty() || arch.widths.contains(&0) {
            return Err(invalid("scorer needs at least one layer of non-zero width"));
        }
        if in_channels == 0 {
            return Err(invalid("scorer needs at least one input channel"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layers = Vec::with_capacity(arch.widths.len());
        let mut c_in = in_channels;
        for &c_out in &arch.widths {
            let std = (2.0 / (c_in * KERNEL * KERNEL) as f64).sqrt();
            let normal = Normal::new(0.0, std).map_err(|e| invalid(e.to_string()))?;
            layers.push(ConvLayer {
                in_channels: c_in,
                out_channels: c_out,
                kernel: (0..c_out * c_in * KERNEL * KERNEL)
                    .map(|_| normal.sample(&mut rng))
                    .collect(),
                bias: vec![0.0; c_out],
            });
            c_in = c_out;
        }
        let normal = Normal::new(0.0, (1.0 / c_in as f64).sqrt()).map_err(|e| invalid(e.to_string()))?;
        let head_weights = (0..c_in).map(|_| normal.sample(&mut rng)).collect();
        Ok(Self {
            layers,
            head_weights,
            head_bias: 0.0,
        })
    }

    /// Input channel count expected for feature dimension `f`: `2f + 2`.
    pub fn channels_for_dim(f: usize) -> usize {
        2 * f + 2
    }

    pub fn input_channels(&self) -> usize {
        self.layers[0].in_channels
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(invalid("scorer has no layers"));
        }
        let mut c = self.layers[0].in_channels;
        for (l, layer) in self.layers.iter().enumerate() {
            if layer.in_channels != c
                || layer.kernel.len() != layer.kernel_len()
                || layer.bias.len() != layer.out_channels
            {
                return Err(Error::ShapeMismatch(format!("scorer layer {l} is inconsistent")));
            }
            c = layer.out_channels;
        }
        if self.head_weights.len() != c {
            return Err(Error::ShapeMismatch("scorer head width mismatch".into()));
        }
        if !self.to_vec().iter().all(|x| x.is_finite()) {
            return Err(Error::NonFinite("scorer parameters".into()));
        }
        Ok(())
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.kernel.len() + l.bias.len()).sum::<usize>() + self.head_weights.len() + 1
    }

    /// Flattened parameters: per layer kernel then bias, then head weights
    /// and head bias. Gradients use the same layout.
    pub fn to_vec(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for l in &self.layers {
            out.extend_from_slice(&l.kernel);
            out.extend_from_slice(&l.bias);
        }
        out.extend_from_slice(&self.head_weights);
        out.push(self.head_bias);
        out
    }

    pub fn set_from_slice(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_params() {
            return Err(Error::ShapeMismatch(format!(
                "expected {} parameters, got {}",
                self.num_params(),
                flat.len()
            )));
        }
        let mut at = 0;
        for l in &mut self.layers {
            let n = l.kernel.len();
            l.kernel.copy_from_slice(&flat[at..at + n]);
            at += n;
            let n = l.bias.len();
            l.bias.copy_from_slice(&flat[at..at + n]);
            at += n;
        }
        let n = self.head_weights.len();
        self.head_weights.copy_from_slice(&flat[at..at + n]);
        self.head_bias = flat[at + n];
        Ok(())
    }

    /// Forward pass on channel-major input planes.
    pub fn forward(&self, input: &[f64], h: usize, w: usize) -> Result<(f64, ForwardCache)> {
        if input.len() != self.input_channels() * h * w {
            return Err(Error::ShapeMismatch(format!(
                "scorer expects {} input channels of {h}x{w}, got {} values",
                self.input_channels(),
                input.len()
            )));
        }
        let (hw, w2) = (h * w, w + 2);
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut x = pad(input, self.input_channels(), h, w);
        for layer in &self.layers {
            let z = conv_forward(layer, &x, h, w);
            let next = pad_wide(&z, layer.out_channels, h, w, leaky);
            inputs.push(x);
            pre.push(z);
            x = next;
        }
        let pooled: Vec<f64> = x
            .chunks_exact((h + 2) * w2)
            .map(|p| p.iter().sum::<f64>() / hw as f64)
            .collect();
        let score = pooled.iter().zip(&self.head_weights).map(|(p, w)| p * w).sum::<f64>() + self.head_bias;
        Ok((
            score,
            ForwardCache {
                height: h,
                width: w,
                inputs,
                pre,
                pooled,
            },
        ))
    }

    /// Gradient of `dscore · score` w.r.t. all parameters (flattened layout).
    pub fn backward(&self, cache: &ForwardCache, dscore: f64) -> Vec<f64> {
        let (h, w) = (cache.height, cache.width);
        let (hw, w2) = (h * w, w + 2);
        let mut layer_grads: Vec<(Vec<f64>, Vec<f64>)> = vec![(Vec::new(), Vec::new()); self.layers.len()];
        let d_head: Vec<f64> = cache.pooled.iter().map(|p| p * dscore).collect();
        // Wide gradient w.r.t. the last activation; scratch columns stay zero.
        let mut da = vec![0.0; self.head_weights.len() * h * w2];
        for (c, &hw_c) in self.head_weights.iter().enumerate() {
            let g = hw_c * dscore / hw as f64;
            for y in 0..h {
                let row = c * h * w2 + y * w2;
                da[row..row + w].fill(g);
            }
        }
        for l in (0..self.layers.len()).rev() {
            let dz: Vec<f64> = da.iter().zip(&cache.pre[l]).map(|(g, &z)| g * leaky_grad(z)).collect();
            let (dk, db, dx) = conv_backward(&self.layers[l], &cache.inputs[l], &dz, h, w, l > 0);
            layer_grads[l] = (dk, db);
            if l > 0 {
                da = unpad_to_wide(&dx, self.layers[l].in_channels, h, w);
            }
        }
        let mut out = Vec::with_capacity(self.num_params());
        for (dk, db) in layer_grads {
            out.extend(dk);
            out.extend(db);
        }
        out.extend(d_head);
        out.push(dscore);
        out
    }

    /// Writes the parameters as a sequence of tensor records: a version/shape
    /// header, then kernel and bias per layer, then head weights and bias.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut header = vec![FORMAT_VERSION, self.layers.len() as f64, self.input_channels() as f64];
        header.extend(self.layers.iter().map(|l| l.out_channels as f64));
        let mut tensors = vec![Tensor::new(vec![header.len()], header)?];
        for l in &self.layers {
            tensors.push(Tensor::new(
                vec![l.out_channels, l.in_channels, KERNEL, KERNEL],
                l.kernel.clone(),
            )?);
            tensors.push(Tensor::new(vec![l.out_channels], l.bias.clone())?);
        }
        tensors.push(Tensor::new(vec![self.head_weights.len()], self.head_weights.clone())?);
        tensors.push(Tensor::new(vec![1], vec![self.head_bias])?);
        save_tensors(path, &tensors)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let tensors = load_tensors(path)?;
        let bad = |m: &str| Error::TensorFormat(format!("{}: {m}", path.display()));
        let header = tensors.first().ok_or_else(|| bad("empty file"))?;
        if header.data.first() != Some(&FORMAT_VERSION) {
            return Err(bad("unsupported scorer format version"));
        }
        let depth = *header.data.get(1).ok_or_else(|| bad("short header"))? as usize;
        if header.data.len() != 3 + depth || tensors.len() != 1 + 2 * depth + 2 {
            return Err(bad("header does not match record count"));
        }
        let mut c_in = header.data[2] as usize;
        let mut layers = Vec::with_capacity(depth);
        for l in 0..depth {
            let c_out = header.data[3 + l] as usize;
            let k = &tensors[1 + 2 * l];
            let b = &tensors[2 + 2 * l];
            if k.dims != [c_out, c_in, KERNEL, KERNEL] || b.dims != [c_out] {
                return Err(bad(&format!("layer {l} has wrong shape")));
            }
            layers.push(ConvLayer {
                in_channels: c_in,
                out_channels: c_out,
                kernel: k.data.clone(),
                bias: b.data.clone(),
            });
            c_in = c_out;
        }
        let hw = &tensors[1 + 2 * depth];
        let hb = &tensors[2 + 2 * depth];
        if hw.dims != [c_in] || hb.dims != [1] {
            return Err(bad("head has wrong shape"));
        }
        let params = Self {
            layers,
            head_weights: hw.data.clone(),
            head_bias: hb.data[0],
        };
        params.validate()?;
        Ok(params)
    }

    /// Same values as stored on disk (`f32` precision).
    pub fn quantized(&self) -> Self {
        let mut out = self.clone();
        let flat: Vec<f64> = self.to_vec().iter().map(|&x| x as f32 as f64).collect();
        out.set_from_slice(&flat).expect("same layout");
        out
    }
}

/// Score of one unit under the network.
pub fn conv_score(unit: &CostVolumeUnit<'_>, params: &ScorerParams) -> Result<f64> {
    let expect = ScorerParams::channels_for_dim(unit.dim());
    if params.input_channels() != expect {
        return Err(Error::ShapeMismatch(format!(
            "scorer takes {} channels, unit provides {expect}",
            params.input_channels()
        )));
    }
    let x = unit_input(unit);
    Ok(params.forward(&x, unit.height(), unit.width())?.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    /// Direct seven-loop convolution, independent of the strided kernel above.
    fn naive_forward(p: &ScorerParams, input: &[f64], h: usize, w: usize) -> f64 {
        let mut x = input.to_vec();
        for l in &p.layers {
            let mut out = vec![0.0; l.out_channels * h * w];
            for o in 0..l.out_channels {
                for y in 0..h {
                    for xx in 0..w {
                        let mut s = l.bias[o];
                        for i in 0..l.in_channels {
                            for ky in 0..3 {
                                for kx in 0..3 {
                                    let sy = y as isize + ky as isize - 1;
                                    let sx = xx as isize + kx as isize - 1;
                                    if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                                        continue;
                                    }
                                    s += l.kernel[((o * l.in_channels + i) * 3 + ky) * 3 + kx]
                                        * x[(i * h + sy as usize) * w + sx as usize];
                                }
                            }
                        }
                        out[(o * h + y) * w + xx] = if s > 0.0 { s } else { 0.1 * s };
                    }
                }
            }
            x = out;
        }
        let c = p.head_weights.len();
        let mut score = p.head_bias;
        for ch in 0..c {
            let mean: f64 = x[ch * h * w..(ch + 1) * h * w].iter().sum::<f64>() / (h * w) as f64;
            score += p.head_weights[ch] * mean;
        }
        score
    }

    fn random_input(c: usize, h: usize, w: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..c * h * w).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    #[test]
    fn forward_matches_naive_oracle() {
        for (h, w) in [(5, 7), (1, 4), (3, 1), (2, 2)] {
            let p = ScorerParams::random(6, &ScorerArch { widths: vec![5, 4, 3] }, 1).unwrap();
            let x = random_input(6, h, w, 2);
            let (s, _) = p.forward(&x, h, w).unwrap();
            let oracle = naive_forward(&p, &x, h, w);
            assert!((s - oracle).abs() < 1e-6, "{h}x{w}: {s} vs {oracle}");
        }
    }

    #[test]
    fn zero_head_gives_zero() {
        let mut p = ScorerParams::random(4, &ScorerArch::default(), 3).unwrap();
        p.head_weights.fill(0.0);
        p.head_bias = 0.0;
        let (s, _) = p.forward(&random_input(4, 6, 6, 4), 6, 6).unwrap();
        assert_eq!(s, 0.0);
    }

    #[test]
    fn backward_matches_finite_differences() {
        let p = ScorerParams::random(4, &ScorerArch { widths: vec![3, 2] }, 5).unwrap();
        let (h, w) = (4, 5);
        let x = random_input(4, h, w, 6);
        let (_, cache) = p.forward(&x, h, w).unwrap();
        let grad = p.backward(&cache, 1.0);
        let base = p.to_vec();
        let f = |theta: &[f64]| {
            let mut q = p.clone();
            q.set_from_slice(theta).unwrap();
            q.forward(&x, h, w).unwrap().0
        };
        let eps = 1e-6;
        let mut worst: f64 = 0.0;
        for k in 0..base.len() {
            let mut plus = base.clone();
            let mut minus = base.clone();
            plus[k] += eps;
            minus[k] -= eps;
            let fd = (f(&plus) - f(&minus)) / (2.0 * eps);
            let rel = (fd - grad[k]).abs() / fd.abs().max(grad[k].abs()).max(1e-8);
            worst = worst.max(rel);
        }
        assert!(worst < 1e-4, "max relative error {worst}");
    }

    #[test]
    fn flatten_roundtrip_and_validation() {
        let p = ScorerParams::random(18, &ScorerArch::default(), 7).unwrap();
        assert_eq!(p.depth(), 4);
        let flat = p.to_vec();
        let mut q = ScorerParams::random(18, &ScorerArch::default(), 8).unwrap();
        q.set_from_slice(&flat).unwrap();
        assert_eq!(p, q);
        assert!(q.set_from_slice(&flat[1..]).is_err());
        assert!(p.validate().is_ok());
        assert!(p.forward(&[0.0; 10], 2, 2).is_err());
    }

    #[test]
    fn save_load_roundtrip() {
        let p = ScorerParams::random(10, &ScorerArch { widths: vec![4, 3] }, 9).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("scorer.bin");
        p.save(&path).unwrap();
        let back = ScorerParams::load(&path).unwrap();
        assert_eq!(back, p.quantized());
        std::fs::write(&path, b"MFI2P\0garbage").unwrap();
        assert!(ScorerParams::load(&path).is_err());
    }
}
