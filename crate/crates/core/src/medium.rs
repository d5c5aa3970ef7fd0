//! Direction-conditioned medium field.
//!
//! A ray direction is encoded with real spherical harmonics and mapped by a
//! small perceptron (two sigmoid hidden layers) to the per-channel medium
//! color, attenuation and backscatter coefficients. The field is evaluated
//! once per pixel ray.

use nalgebra::{DMatrix, DVector, Vector3};
use rand::Rng;
use rayon::prelude::*;

use crate::scene::sigmoid;
use crate::sh;

pub const DEFAULT_ENCODING_DEGREE: usize = 4;
pub const DEFAULT_HIDDEN: usize = 128;
/// rgb medium color, rgb attenuation, rgb backscatter.
pub const MEDIUM_OUTPUTS: usize = 9;

/// Number of directions evaluated per batched matrix product. Fixed so the
/// reduction order never depends on the thread count.
const CHUNK: usize = 2048;

pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

/// Per-pixel medium triple.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MediumSample {
    pub c_med: Vector3<f64>,
    pub sigma_attn: Vector3<f64>,
    pub sigma_bs: Vector3<f64>,
}

impl MediumSample {
    /// No medium at all: zero color and zero density. Rendering with this
    /// sample reduces the compositor to plain alpha blending.
    pub fn vacuum() -> Self {
        Self {
            c_med: Vector3::zeros(),
            sigma_attn: Vector3::zeros(),
            sigma_bs: Vector3::zeros(),
        }
    }

    pub fn uniform(c_med: f64, sigma_attn: f64, sigma_bs: f64) -> Self {
        Self {
            c_med: Vector3::repeat(c_med),
            sigma_attn: Vector3::repeat(sigma_attn),
            sigma_bs: Vector3::repeat(sigma_bs),
        }
    }
}

/// Upstream derivative of a scalar loss with respect to one [`MediumSample`].
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct MediumSampleGrad {
    pub c_med: Vector3<f64>,
    pub sigma_attn: Vector3<f64>,
    pub sigma_bs: Vector3<f64>,
}

impl MediumSampleGrad {
    fn as_array(&self) -> [f64; MEDIUM_OUTPUTS] {
        let mut a = [0.0; MEDIUM_OUTPUTS];
        a[0..3].copy_from_slice(self.c_med.as_slice());
        a[3..6].copy_from_slice(self.sigma_attn.as_slice());
        a[6..9].copy_from_slice(self.sigma_bs.as_slice());
        a
    }

    pub fn is_zero(&self) -> bool {
        self.as_array().iter().all(|&v| v == 0.0)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DenseLayer {
    pub weight: DMatrix<f64>,
    pub bias: DVector<f64>,
}

impl DenseLayer {
    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            weight: DMatrix::zeros(outputs, inputs),
            bias: DVector::zeros(outputs),
        }
    }

    pub fn inputs(&self) -> usize {
        self.weight.ncols()
    }

    pub fn outputs(&self) -> usize {
        self.weight.nrows()
    }

    fn forward(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let mut z = DMatrix::from_fn(self.outputs(), x.ncols(), |r, _| self.bias[r]);
        gemm_into(&self.weight, x, &mut z, 1.0);
        z
    }
}

/// `c = a·b + beta·c` through one fixed kernel. Each output column is
/// reduced in the same order whatever the number of columns, so batched and
/// single-direction evaluation agree bit for bit.
fn gemm_into(a: &DMatrix<f64>, b: &DMatrix<f64>, c: &mut DMatrix<f64>, beta: f64) {
    let (m, k, n) = (a.nrows(), a.ncols(), b.ncols());
    assert_eq!(b.nrows(), k);
    assert_eq!((c.nrows(), c.ncols()), (m, n));
    // SAFETY: all three matrices are dense column-major buffers whose
    // dimensions were checked above.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            1,
            m as isize,
            b.as_ptr(),
            1,
            k as isize,
            beta,
            c.as_mut_ptr(),
            1,
            m as isize,
        );
    }
}

/// Weights of the medium perceptron; also used as the gradient container.
#[derive(Clone, Debug, PartialEq)]
pub struct MediumNetwork {
    pub encoding_degree: usize,
    /// encoding → hidden, hidden → hidden, hidden → 9 outputs.
    pub layers: Vec<DenseLayer>,
}

pub type MediumGradients = MediumNetwork;

impl MediumNetwork {
    pub fn zeros(encoding_degree: usize, hidden: usize) -> Self {
        let enc = sh::num_coeffs(encoding_degree);
        Self {
            encoding_degree,
            layers: vec![
                DenseLayer::zeros(enc, hidden),
                DenseLayer::zeros(hidden, hidden),
                DenseLayer::zeros(hidden, MEDIUM_OUTPUTS),
            ],
        }
    }

    /// Weights uniform in `±1/sqrt(fan_in)`, zero biases.
    pub fn random(rng: &mut impl Rng, encoding_degree: usize, hidden: usize) -> Self {
        let mut net = Self::zeros(encoding_degree, hidden);
        for layer in &mut net.layers {
            let bound = 1.0 / (layer.inputs() as f64).sqrt();
            layer
                .weight
                .iter_mut()
                .for_each(|w| *w = rng.random_range(-bound..bound));
        }
        net
    }

    pub fn encoding_size(&self) -> usize {
        sh::num_coeffs(self.encoding_degree)
    }

    pub fn hidden(&self) -> usize {
        self.layers[0].outputs()
    }

    /// Same architecture with all parameters zero.
    pub fn zeros_like(&self) -> Self {
        Self {
            encoding_degree: self.encoding_degree,
            layers: self
                .layers
                .iter()
                .map(|l| DenseLayer::zeros(l.inputs(), l.outputs()))
                .collect(),
        }
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    /// Parameter tensors in a fixed order: w0, b0, w1, b1, w2, b2.
    pub fn tensors(&self) -> Vec<&[f64]> {
        self.layers
            .iter()
            .flat_map(|l| [l.weight.as_slice(), l.bias.as_slice()])
            .collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        self.layers
            .iter_mut()
            .flat_map(|l| [l.weight.as_mut_slice(), l.bias.as_mut_slice()])
            .collect()
    }

    pub fn tensor_names(&self) -> Vec<String> {
        (0..self.layers.len())
            .flat_map(|i| [format!("medium.layer{i}.weight"), format!("medium.layer{i}.bias")])
            .collect()
    }

    pub fn add_assign(&mut self, other: &MediumNetwork) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.weight += &b.weight;
            a.bias += &b.bias;
        }
    }

    pub fn scale_mut(&mut self, s: f64) {
        for l in &mut self.layers {
            l.weight *= s;
            l.bias *= s;
        }
    }

    pub fn quantize_to_f32(&mut self) {
        for t in self.tensors_mut() {
            t.iter_mut().for_each(|v| *v = *v as f32 as f64);
        }
    }

    fn encode(&self, dirs: &[Vector3<f64>]) -> DMatrix<f64> {
        let n = self.encoding_size();
        let mut enc = DMatrix::zeros(n, dirs.len());
        for (j, d) in dirs.iter().enumerate() {
            sh::encode_direction(self.encoding_degree, d, enc.column_mut(j).as_mut_slice());
        }
        enc
    }

    fn forward_chunk(&self, dirs: &[Vector3<f64>]) -> ChunkActivations {
        let enc = self.encode(dirs);
        let mut h1 = self.layers[0].forward(&enc);
        h1.apply(|v| *v = sigmoid(*v));
        let mut h2 = self.layers[1].forward(&h1);
        h2.apply(|v| *v = sigmoid(*v));
        let out = self.layers[2].forward(&h2);
        ChunkActivations { enc, h1, h2, out }
    }

    /// Evaluates the field for one direction.
    pub fn sample(&self, dir: &Vector3<f64>) -> MediumSample {
        self.sample_batch(std::slice::from_ref(dir))[0]
    }

    /// Evaluates the field for many directions. Equal to calling
    /// [`MediumNetwork::sample`] on each element.
    pub fn sample_batch(&self, dirs: &[Vector3<f64>]) -> Vec<MediumSample> {
        dirs.par_chunks(CHUNK)
            .flat_map_iter(|chunk| {
                let acts = self.forward_chunk(chunk);
                acts.samples().collect::<Vec<_>>()
            })
            .collect()
    }

    /// [`MediumNetwork::sample_batch`] that keeps the hidden activations for
    /// a later [`MediumNetwork::backward_cached`].
    pub fn sample_batch_cached(&self, dirs: &[Vector3<f64>]) -> (Vec<MediumSample>, MediumActivations) {
        let chunks: Vec<ChunkActivations> = dirs.par_chunks(CHUNK).map(|c| self.forward_chunk(c)).collect();
        let samples = chunks.iter().flat_map(ChunkActivations::samples).collect();
        (samples, MediumActivations { chunks })
    }

    /// Reverse-mode derivatives of `Σ_j upstream_j · sample(dirs_j)` with
    /// respect to every weight and bias.
    pub fn backward_batch(&self, dirs: &[Vector3<f64>], upstream: &[MediumSampleGrad]) -> MediumGradients {
        assert_eq!(dirs.len(), upstream.len());
        let partials: Vec<MediumGradients> = dirs
            .par_chunks(CHUNK)
            .zip(upstream.par_chunks(CHUNK))
            .map(|(d, g)| self.backward_chunk(d, g))
            .collect();
        self.sum_partials(&partials)
    }

    /// Same as [`MediumNetwork::backward_batch`] for the directions whose
    /// activations are in `acts`.
    pub fn backward_cached(&self, acts: &MediumActivations, upstream: &[MediumSampleGrad]) -> MediumGradients {
        assert_eq!(acts.len(), upstream.len());
        let partials: Vec<MediumGradients> = acts
            .chunks
            .par_iter()
            .zip(upstream.par_chunks(CHUNK))
            .map(|(a, g)| self.backward_from(a, g))
            .collect();
        self.sum_partials(&partials)
    }

    fn sum_partials(&self, partials: &[MediumGradients]) -> MediumGradients {
        let mut total = self.zeros_like();
        for p in partials {
            total.add_assign(p);
        }
        total
    }

    fn backward_chunk(&self, dirs: &[Vector3<f64>], upstream: &[MediumSampleGrad]) -> MediumGradients {
        let active: Vec<usize> = (0..dirs.len()).filter(|&j| !upstream[j].is_zero()).collect();
        if active.is_empty() {
            return self.zeros_like();
        }
        let dirs: Vec<Vector3<f64>> = active.iter().map(|&j| dirs[j]).collect();
        let upstream: Vec<MediumSampleGrad> = active.iter().map(|&j| upstream[j]).collect();
        self.backward_from(&self.forward_chunk(&dirs), &upstream)
    }

    fn backward_from(&self, acts: &ChunkActivations, upstream: &[MediumSampleGrad]) -> MediumGradients {
        let mut grads = self.zeros_like();
        let n = upstream.len();
        let mut dz3 = DMatrix::zeros(MEDIUM_OUTPUTS, n);
        for (col, up) in upstream.iter().enumerate() {
            let g = up.as_array();
            for k in 0..MEDIUM_OUTPUTS {
                let z = acts.out[(k, col)];
                // sigmoid' for the color head, softplus' = sigmoid for densities.
                let local = if k < 3 {
                    let s = sigmoid(z);
                    s * (1.0 - s)
                } else {
                    sigmoid(z)
                };
                dz3[(k, col)] = g[k] * local;
            }
        }

        let backprop = |dz: &DMatrix<f64>, input: &DMatrix<f64>, layer: &mut DenseLayer| {
            gemm_nt(dz, input, &mut layer.weight);
            layer.bias = dz.column_sum();
        };
        backprop(&dz3, &acts.h2, &mut grads.layers[2]);
        let mut dz2 = gemm_tn(&self.layers[2].weight, &dz3);
        dz2.zip_apply(&acts.h2, |d, h| *d *= h * (1.0 - h));
        backprop(&dz2, &acts.h1, &mut grads.layers[1]);
        let mut dz1 = gemm_tn(&self.layers[1].weight, &dz2);
        dz1.zip_apply(&acts.h1, |d, h| *d *= h * (1.0 - h));
        backprop(&dz1, &acts.enc, &mut grads.layers[0]);
        grads
    }
}

/// Hidden activations of one chunk of directions.
#[derive(Clone, Debug)]
struct ChunkActivations {
    enc: DMatrix<f64>,
    h1: DMatrix<f64>,
    h2: DMatrix<f64>,
    out: DMatrix<f64>,
}

impl ChunkActivations {
    fn samples(&self) -> impl Iterator<Item = MediumSample> + '_ {
        (0..self.out.ncols()).map(|j| head_activation(self.out.column(j).as_slice()))
    }
}

/// Forward-pass state kept between [`MediumNetwork::sample_batch_cached`]
/// and [`MediumNetwork::backward_cached`].
#[derive(Clone, Debug)]
pub struct MediumActivations {
    chunks: Vec<ChunkActivations>,
}

impl MediumActivations {
    pub fn len(&self) -> usize {
        self.chunks.iter().map(|c| c.out.ncols()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// `c = a · bᵀ`.
fn gemm_nt(a: &DMatrix<f64>, b: &DMatrix<f64>, c: &mut DMatrix<f64>) {
    let (m, k, n) = (a.nrows(), a.ncols(), b.nrows());
    assert_eq!(b.ncols(), k);
    assert_eq!((c.nrows(), c.ncols()), (m, n));
    // SAFETY: dense column-major buffers with the dimensions checked above;
    // bᵀ is read through swapped strides.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            1,
            m as isize,
            b.as_ptr(),
            n as isize,
            1,
            0.0,
            c.as_mut_ptr(),
            1,
            m as isize,
        );
    }
}

/// `aᵀ · b`.
fn gemm_tn(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let (k, m, n) = (a.nrows(), a.ncols(), b.ncols());
    assert_eq!(b.nrows(), k);
    let mut c = DMatrix::zeros(m, n);
    // SAFETY: dense column-major buffers with the dimensions checked above;
    // aᵀ is read through swapped strides.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            k as isize,
            1,
            b.as_ptr(),
            1,
            k as isize,
            0.0,
            c.as_mut_ptr(),
            1,
            m as isize,
        );
    }
    c
}

fn head_activation(z: &[f64]) -> MediumSample {
    MediumSample {
        c_med: Vector3::new(sigmoid(z[0]), sigmoid(z[1]), sigmoid(z[2])),
        sigma_attn: Vector3::new(softplus(z[3]), softplus(z[4]), softplus(z[5])),
        sigma_bs: Vector3::new(softplus(z[6]), softplus(z[7]), softplus(z[8])),
    }
}

pub fn sample_medium(net: &MediumNetwork, dir: &Vector3<f64>) -> MediumSample {
    net.sample(dir)
}

pub fn medium_gradients(net: &MediumNetwork, dir: &Vector3<f64>, upstream: &MediumSampleGrad) -> MediumGradients {
    net.backward_chunk(std::slice::from_ref(dir), std::slice::from_ref(upstream))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_dirs(rng: &mut impl Rng, n: usize) -> Vec<Vector3<f64>> {
        (0..n)
            .map(|_| {
                Vector3::new(
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                    rng.random_range(0.2..1.0),
                )
                .normalize()
            })
            .collect()
    }

    #[test]
    fn zero_network_fixed_point() {
        let net = MediumNetwork::zeros(DEFAULT_ENCODING_DEGREE, DEFAULT_HIDDEN);
        let s = net.sample(&Vector3::new(0.0, 0.6, 0.8));
        assert_eq!(s.c_med, Vector3::repeat(0.5));
        let ln2 = 2f64.ln();
        assert!((s.sigma_attn - Vector3::repeat(ln2)).abs().max() < 1e-15);
        assert!((s.sigma_bs - Vector3::repeat(0.693147)).abs().max() < 1e-6);
    }

    #[test]
    fn bias_only_network_ignores_direction() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut net = MediumNetwork::zeros(4, 16);
        for l in &mut net.layers {
            l.bias.iter_mut().for_each(|b| *b = rng.random_range(-2.0..2.0));
        }
        // Hidden biases only reach the head through the (zero) weights, so
        // give the last layer weights but keep the first layer's at zero.
        net.layers[2].weight.iter_mut().for_each(|w| *w = rng.random_range(-1.0..1.0));
        let a = net.sample(&Vector3::x());
        let b = net.sample(&Vector3::new(0.0, -0.6, 0.8));
        assert_eq!(a, b);
    }

    #[test]
    fn outputs_stay_in_range_and_batch_matches_single() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut net = MediumNetwork::random(&mut rng, 4, 32);
        net.layers[2].bias.iter_mut().for_each(|b| *b = rng.random_range(-5.0..5.0));
        let dirs = random_dirs(&mut rng, CHUNK + 37);
        let batch = net.sample_batch(&dirs);
        for (d, s) in dirs.iter().zip(&batch) {
            assert_eq!(*s, net.sample(d));
            assert!(s.c_med.iter().all(|&c| c > 0.0 && c < 1.0));
            assert!(s.sigma_attn.iter().chain(s.sigma_bs.iter()).all(|&v| v > 0.0 && v.is_finite()));
        }
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let net = MediumNetwork::random(&mut rng, 4, 16);
        let g = medium_gradients(&net, &Vector3::z(), &MediumSampleGrad::default());
        assert!(g.tensors().iter().all(|t| t.iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn zero_network_color_bias_gradient_is_quarter_of_upstream() {
        let net = MediumNetwork::zeros(4, 8);
        let up = MediumSampleGrad {
            c_med: Vector3::new(1.7, 0.0, 0.0),
            ..Default::default()
        };
        let g = medium_gradients(&net, &Vector3::z(), &up);
        assert!((g.layers[2].bias[0] - 1.7 * 0.25).abs() < 1e-15);
        assert_eq!(g.layers[2].bias[1], 0.0);
    }

    // Central finite differences over every parameter of a small network.
    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut net = MediumNetwork::random(&mut rng, 4, 6);
        for l in &mut net.layers {
            l.bias.iter_mut().for_each(|b| *b = rng.random_range(-0.5..0.5));
        }
        let dir = Vector3::new(0.3, -0.4, 0.866).normalize();
        let up = MediumSampleGrad {
            c_med: Vector3::new(0.3, -1.2, 0.7),
            sigma_attn: Vector3::new(-0.4, 0.9, 1.1),
            sigma_bs: Vector3::new(0.5, 0.25, -0.8),
        };
        let objective = |n: &MediumNetwork| {
            let s = n.sample(&dir);
            up.c_med.dot(&s.c_med) + up.sigma_attn.dot(&s.sigma_attn) + up.sigma_bs.dot(&s.sigma_bs)
        };
        let analytic = medium_gradients(&net, &dir, &up);
        let h = 1e-4;
        let mut worst = 0.0f64;
        let n_tensors = net.tensors().len();
        for t in 0..n_tensors {
            let len = net.tensors()[t].len();
            for i in 0..len {
                let mut plus = net.clone();
                plus.tensors_mut()[t][i] += h;
                let mut minus = net.clone();
                minus.tensors_mut()[t][i] -= h;
                let fd = (objective(&plus) - objective(&minus)) / (2.0 * h);
                let a = analytic.tensors()[t][i];
                let denom = a.abs().max(fd.abs());
                if (a - fd).abs() > 1e-10 {
                    worst = worst.max((a - fd).abs() / denom);
                }
            }
        }
        assert!(worst < 1e-5, "worst relative error {worst:e}");
    }
}
