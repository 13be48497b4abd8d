//! Fourier amplitude/phase handling for image batches.
//!
//! Spectra use the unshifted DFT layout (DC at `[0, 0]`), an unnormalized
//! forward transform and a `1/(H*W)` inverse.

use std::f64::consts::PI;

use fopro_autograd::{mirror_last2, Tensor, Var};
use ndarray::{Array3, Array4, ArrayD, Axis, IxDyn};
use rustfft::num_complex::Complex;
use rustfft::{FftDirection, FftPlanner};
use thiserror::Error;

/// Absolute tolerance (scaled by `max(1, |a|)`) for Hermitian symmetry checks.
pub const HERMITIAN_TOLERANCE: f64 = 1e-4;
/// Largest imaginary residual accepted when discarding the imaginary part.
pub const IMAGINARY_TOLERANCE: f64 = 1e-5;

#[derive(Debug, Error, PartialEq)]
pub enum SpectralError {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("contract violation: {0}")]
    ContractViolation(String),
}

/// A batch of images, `B x C x H x W`, nominally in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageBatch(Array4<f64>);

impl ImageBatch {
    pub fn new(data: Array4<f64>) -> Result<Self, SpectralError> {
        if let Some(bad) = data.iter().find(|v| !v.is_finite()) {
            return Err(SpectralError::InvalidInput(format!(
                "image batch contains non-finite value {bad}"
            )));
        }
        Ok(Self(data))
    }

    pub fn data(&self) -> &Array4<f64> {
        &self.0
    }

    pub fn into_inner(self) -> Array4<f64> {
        self.0
    }

    pub fn dim(&self) -> (usize, usize, usize, usize) {
        self.0.dim()
    }
}

/// Amplitude and phase of a batch's per-channel 2-D DFT.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralDecomposition {
    pub amplitude: Array4<f64>,
    /// Phase in `(-pi, pi]`.
    pub phase: Array4<f64>,
}

/// Nonnegative, Hermitian-symmetric amplitude spectrum, `C x H x W`.
#[derive(Debug, Clone, PartialEq)]
pub struct FourierPrompt(Array3<f64>);

impl FourierPrompt {
    /// Wraps `delta`, checking both prompt invariants.
    pub fn new(delta: Array3<f64>) -> Result<Self, SpectralError> {
        if delta.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(SpectralError::ContractViolation(
                "prompt must be finite and nonnegative".into(),
            ));
        }
        check_hermitian(&delta.clone().into_dyn())?;
        Ok(Self(delta))
    }

    pub fn delta(&self) -> &Array3<f64> {
        &self.0
    }

    pub fn into_inner(self) -> Array3<f64> {
        self.0
    }
}

fn plane_fft(
    planner: &mut FftPlanner<f64>,
    buf: &mut [Complex<f64>],
    h: usize,
    w: usize,
    dir: FftDirection,
) {
    let row_fft = planner.plan_fft(w, dir);
    for row in buf.chunks_exact_mut(w) {
        row_fft.process(row);
    }
    let col_fft = planner.plan_fft(h, dir);
    let mut col = vec![Complex::default(); h];
    for v in 0..w {
        for u in 0..h {
            col[u] = buf[u * w + v];
        }
        col_fft.process(&mut col);
        for u in 0..h {
            buf[u * w + v] = col[u];
        }
    }
}

/// Forward DFT of every `H x W` plane of a real tensor, projected onto the
/// Hermitian subspace so that conjugate bins agree exactly.
fn real_planes_fft(x: &Tensor) -> Vec<Complex<f64>> {
    let nd = x.ndim();
    let (h, w) = (x.shape()[nd - 2], x.shape()[nd - 1]);
    let x = x.as_standard_layout();
    let mut buf: Vec<Complex<f64>> = x.iter().map(|&v| Complex::new(v, 0.0)).collect();
    let mut planner = FftPlanner::new();
    for plane in buf.chunks_exact_mut(h * w) {
        plane_fft(&mut planner, plane, h, w, FftDirection::Forward);
        let raw = plane.to_vec();
        for u in 0..h {
            for v in 0..w {
                let m = ((h - u) % h) * w + (w - v) % w;
                plane[u * w + v] = (raw[u * w + v] + raw[m].conj()) * 0.5;
            }
        }
    }
    buf
}

/// Normalized inverse DFT of complex planes; returns (real, imaginary) parts.
fn planes_ifft(mut buf: Vec<Complex<f64>>, h: usize, w: usize) -> (Vec<f64>, Vec<f64>) {
    let mut planner = FftPlanner::new();
    let scale = 1.0 / (h * w) as f64;
    for plane in buf.chunks_exact_mut(h * w) {
        plane_fft(&mut planner, plane, h, w, FftDirection::Inverse);
    }
    buf.iter().map(|c| (c.re * scale, c.im * scale)).unzip()
}

fn wrap_phase(p: f64) -> f64 {
    if p <= -PI {
        p + 2.0 * PI
    } else {
        p
    }
}

/// Amplitude `|F(x)|` and phase `arg F(x)` of each image channel.
pub fn decompose(x: &ImageBatch) -> Result<SpectralDecomposition, SpectralError> {
    let data = x.data();
    if data.iter().any(|v| !v.is_finite()) {
        return Err(SpectralError::InvalidInput("non-finite pixel".into()));
    }
    let spectrum = real_planes_fft(&data.clone().into_dyn());
    let dim = data.raw_dim();
    let amplitude =
        Array4::from_shape_vec(dim, spectrum.iter().map(|c| c.norm()).collect()).unwrap();
    let phase = Array4::from_shape_vec(dim, spectrum.iter().map(|c| wrap_phase(c.arg())).collect())
        .unwrap();
    Ok(SpectralDecomposition { amplitude, phase })
}

/// Verifies `a[u, v] == a[-u, -v]` over the last two axes.
pub fn check_hermitian(a: &Tensor) -> Result<(), SpectralError> {
    let mirrored = mirror_last2(a);
    for (x, y) in a.iter().zip(mirrored.iter()) {
        if (x - y).abs() > HERMITIAN_TOLERANCE * x.abs().max(y.abs()).max(1.0) {
            return Err(SpectralError::ContractViolation(format!(
                "amplitude is not Hermitian-symmetric ({x} vs mirrored {y})"
            )));
        }
    }
    Ok(())
}

/// `(|raw| + |mirror(raw)|) / 2`: nonnegative, Hermitian, idempotent.
pub fn hermitian_project(raw: &Array3<f64>) -> Result<FourierPrompt, SpectralError> {
    if raw.iter().any(|v| !v.is_finite()) {
        return Err(SpectralError::InvalidInput(
            "non-finite prompt entry".into(),
        ));
    }
    let abs = raw.mapv(f64::abs).into_dyn();
    let mirrored = mirror_last2(&abs);
    let out = (&abs + &mirrored) * 0.5;
    Ok(FourierPrompt(out.into_dimensionality().unwrap()))
}

/// `alpha[b] * A[b] + (1 - alpha[b]) * delta`, one coefficient per batch element.
pub fn mix_amplitude(
    amplitude: &Array4<f64>,
    prompt: &FourierPrompt,
    alpha: &[f64],
) -> Result<Array4<f64>, SpectralError> {
    let (b, c, h, w) = amplitude.dim();
    if prompt.delta().dim() != (c, h, w) {
        return Err(SpectralError::InvalidArgument(format!(
            "prompt shape {:?} does not match amplitude {:?}",
            prompt.delta().dim(),
            (c, h, w)
        )));
    }
    if alpha.len() != b {
        return Err(SpectralError::InvalidArgument(format!(
            "expected {b} mixing coefficients, got {}",
            alpha.len()
        )));
    }
    if let Some(a) = alpha.iter().find(|a| !(0.0..=1.0).contains(*a)) {
        return Err(SpectralError::InvalidArgument(format!(
            "mixing coefficient {a} outside [0, 1]"
        )));
    }
    let mut mixed = amplitude.clone();
    for (mut item, &a) in mixed.axis_iter_mut(Axis(0)).zip(alpha) {
        item.zip_mut_with(prompt.delta(), |m, &d| *m = a * *m + (1.0 - a) * d);
    }
    Ok(mixed)
}

/// Real image from amplitude and phase: `Re F^-1(A_hat * exp(i phi))`.
///
/// The result is not clamped to `[0, 1]`.
pub fn reconstruct(a_hat: &Array4<f64>, phase: &Array4<f64>) -> Result<ImageBatch, SpectralError> {
    if a_hat.dim() != phase.dim() {
        return Err(SpectralError::InvalidArgument(format!(
            "amplitude {:?} and phase {:?} differ in shape",
            a_hat.dim(),
            phase.dim()
        )));
    }
    if a_hat.iter().chain(phase.iter()).any(|v| !v.is_finite()) {
        return Err(SpectralError::InvalidInput("non-finite spectrum".into()));
    }
    let a_dyn = a_hat.clone().into_dyn();
    check_hermitian(&a_dyn)?;
    let (re, im) = inverse_real(&a_dyn, &phase.clone().into_dyn());
    let residual = im.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if residual >= IMAGINARY_TOLERANCE {
        return Err(SpectralError::ContractViolation(format!(
            "inverse transform has imaginary residual {residual:e}; phase is not that of a real image"
        )));
    }
    ImageBatch::new(Array4::from_shape_vec(a_hat.raw_dim(), re).unwrap())
}

fn inverse_real(a_hat: &Tensor, phase: &Tensor) -> (Vec<f64>, Vec<f64>) {
    let nd = a_hat.ndim();
    let (h, w) = (a_hat.shape()[nd - 2], a_hat.shape()[nd - 1]);
    let a_hat = a_hat.as_standard_layout();
    let phase = phase.as_standard_layout();
    let buf: Vec<Complex<f64>> = a_hat
        .iter()
        .zip(phase.iter())
        .map(|(&a, &p)| Complex::from_polar(a, p))
        .collect();
    planes_ifft(buf, h, w)
}

/// Differentiable `Re F^-1(A_hat * exp(i phi))` on the graph.
///
/// Unlike [`reconstruct`] this does not validate symmetry: callers feed it
/// Hermitian amplitudes and real-image phases.
pub fn reconstruct_var<'g>(a_hat: Var<'g>, phase: Var<'g>) -> Var<'g> {
    let a = a_hat.value();
    let p = phase.value();
    assert_eq!(a.shape(), p.shape(), "amplitude/phase shape mismatch");
    let shape = a.shape().to_vec();
    let nd = shape.len();
    let (h, w) = (shape[nd - 2], shape[nd - 1]);
    let (re, _) = inverse_real(&a, &p);
    let value = ArrayD::from_shape_vec(IxDyn(&shape), re).unwrap();
    a_hat
        .graph()
        .apply(&[a_hat, phase], value, move |g, needs| {
            // G = F^-1(g) with the same normalization as the forward pass.
            let g = g.as_standard_layout();
            let buf: Vec<Complex<f64>> = g.iter().map(|&v| Complex::new(v, 0.0)).collect();
            let (g_re, g_im) = planes_ifft(buf, h, w);
            let a = a.as_standard_layout();
            let p = p.as_standard_layout();
            let mut da = Vec::with_capacity(g_re.len());
            let mut dp = Vec::with_capacity(g_re.len());
            for (((&gr, &gi), &av), &pv) in g_re.iter().zip(&g_im).zip(a.iter()).zip(p.iter()) {
                let rot = Complex::from_polar(1.0, pv) * Complex::new(gr, gi);
                da.push(rot.re);
                dp.push(-av * rot.im);
            }
            vec![
                needs[0].then(|| ArrayD::from_shape_vec(IxDyn(&shape), da).unwrap()),
                needs[1].then(|| ArrayD::from_shape_vec(IxDyn(&shape), dp).unwrap()),
            ]
        })
}

/// Graph version of [`hermitian_project`].
pub fn hermitian_project_var<'g>(raw: Var<'g>) -> Var<'g> {
    let abs = raw.abs();
    (abs + abs.mirror_2d()) * 0.5
}

/// Graph version of [`mix_amplitude`]: `alpha` is `B x 1 x 1 x 1`, `delta`
/// broadcasts over the batch.
pub fn mix_amplitude_var<'g>(amplitude: Var<'g>, delta: Var<'g>, alpha: Var<'g>) -> Var<'g> {
    alpha * amplitude + (1.0 - alpha) * delta
}

/// Moves DC to the centre for display.
pub fn display_shift(plane: &ndarray::Array2<f64>) -> ndarray::Array2<f64> {
    let (h, w) = plane.dim();
    ndarray::Array2::from_shape_fn((h, w), |(u, v)| {
        plane[[(u + h.div_ceil(2)) % h, (v + w.div_ceil(2)) % w]]
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_batch(shape: (usize, usize, usize, usize), seed: u64) -> ImageBatch {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ImageBatch::new(Array::from_shape_fn(shape, |_| rng.gen::<f64>())).unwrap()
    }

    #[test]
    fn constant_image_is_dc_only() {
        let c = 0.37;
        let x = ImageBatch::new(Array4::from_elem((1, 1, 4, 4), c)).unwrap();
        let s = decompose(&x).unwrap();
        assert!((s.amplitude[[0, 0, 0, 0]] - 16.0 * c).abs() < 1e-12);
        assert_eq!(s.phase[[0, 0, 0, 0]], 0.0);
        for ((_, _, u, v), a) in s.amplitude.indexed_iter() {
            if (u, v) != (0, 0) {
                assert!(a.abs() < 1e-12);
            }
        }
    }

    #[test]
    fn impulse_has_flat_spectrum() {
        let mut data = Array4::zeros((1, 1, 4, 4));
        data[[0, 0, 0, 0]] = 1.0;
        let s = decompose(&ImageBatch::new(data).unwrap()).unwrap();
        assert!(s.amplitude.iter().all(|a| (a - 1.0).abs() < 1e-12));
    }

    #[test]
    fn non_finite_input_rejected() {
        let mut data = Array4::zeros((1, 1, 2, 2));
        data[[0, 0, 1, 1]] = f64::NAN;
        assert!(matches!(
            ImageBatch::new(data),
            Err(SpectralError::InvalidInput(_))
        ));
    }

    #[test]
    fn roundtrip_even_and_odd_sizes() {
        for (h, w) in [(4, 4), (5, 7), (6, 3), (1, 1)] {
            let x = random_batch((2, 3, h, w), (h * 10 + w) as u64);
            let s = decompose(&x).unwrap();
            let back = reconstruct(&s.amplitude, &s.phase).unwrap();
            let err = (back.data() - x.data())
                .mapv(f64::abs)
                .fold(0.0f64, |m, v| m.max(*v));
            assert!(err < 1e-12, "{h}x{w}: {err}");
        }
    }

    #[test]
    fn phase_is_in_half_open_interval() {
        let x = random_batch((3, 3, 6, 6), 9);
        let s = decompose(&x).unwrap();
        assert!(s.phase.iter().all(|&p| p > -PI && p <= PI));
    }

    #[test]
    fn amplitude_is_hermitian() {
        let x = random_batch((1, 3, 5, 6), 3);
        let s = decompose(&x).unwrap();
        check_hermitian(&s.amplitude.into_dyn()).unwrap();
    }

    #[test]
    fn projection_handles_sign_and_is_idempotent() {
        let raw = Array3::from_elem((3, 4, 4), -2.5);
        let p = hermitian_project(&raw).unwrap();
        assert!(p.delta().iter().all(|&v| v == 2.5));

        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let raw = Array3::from_shape_fn((3, 5, 4), |_| rng.gen_range(-1.0..1.0));
        let once = hermitian_project(&raw).unwrap();
        let twice = hermitian_project(once.delta()).unwrap();
        assert_eq!(once, twice);
        FourierPrompt::new(once.into_inner()).unwrap();
    }

    #[test]
    fn mix_endpoints_and_midpoint() {
        let a = Array4::from_elem((2, 3, 4, 4), 2.0);
        let d = FourierPrompt::new(Array3::from_elem((3, 4, 4), 4.0)).unwrap();
        assert_eq!(mix_amplitude(&a, &d, &[1.0, 1.0]).unwrap(), a);
        assert!(mix_amplitude(&a, &d, &[0.0, 0.0])
            .unwrap()
            .iter()
            .all(|&v| v == 4.0));
        assert!(mix_amplitude(&a, &d, &[0.5, 0.5])
            .unwrap()
            .iter()
            .all(|&v| v == 3.0));
    }

    #[test]
    fn mix_rejects_bad_alpha_and_shapes() {
        let a = Array4::from_elem((1, 3, 4, 4), 1.0);
        let d = FourierPrompt::new(Array3::from_elem((3, 4, 4), 1.0)).unwrap();
        assert!(matches!(
            mix_amplitude(&a, &d, &[1.5]),
            Err(SpectralError::InvalidArgument(_))
        ));
        assert!(matches!(
            mix_amplitude(&a, &d, &[-0.1]),
            Err(SpectralError::InvalidArgument(_))
        ));
        assert!(matches!(
            mix_amplitude(&a, &d, &[0.5, 0.5]),
            Err(SpectralError::InvalidArgument(_))
        ));
        let d8 = FourierPrompt::new(Array3::from_elem((3, 8, 8), 1.0)).unwrap();
        assert!(mix_amplitude(&a, &d8, &[0.5]).is_err());
    }

    #[test]
    fn reconstruct_rejects_asymmetric_amplitude() {
        let x = random_batch((1, 1, 4, 4), 5);
        let mut s = decompose(&x).unwrap();
        s.amplitude[[0, 0, 1, 2]] += 0.5;
        assert!(matches!(
            reconstruct(&s.amplitude, &s.phase),
            Err(SpectralError::ContractViolation(_))
        ));
    }

    #[test]
    fn amplitude_scaling_of_constant_image() {
        let x = ImageBatch::new(Array4::from_elem((1, 3, 4, 4), 0.25)).unwrap();
        let s = decompose(&x).unwrap();
        let doubled = s.amplitude.mapv(|a| 2.0 * a);
        let y = reconstruct(&doubled, &s.phase).unwrap();
        assert!(y.data().iter().all(|&v| (v - 0.5).abs() < 1e-12));
    }

    #[test]
    fn prompt_mixing_keeps_images_real() {
        let x = random_batch((4, 3, 8, 8), 6);
        let s = decompose(&x).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let raw = Array3::from_shape_fn((3, 8, 8), |_| rng.gen_range(-5.0..5.0));
        let prompt = hermitian_project(&raw).unwrap();
        let mixed = mix_amplitude(&s.amplitude, &prompt, &[0.0, 0.3, 0.7, 1.0]).unwrap();
        reconstruct(&mixed, &s.phase).unwrap();
    }

    #[test]
    fn display_shift_centres_dc() {
        let mut p = ndarray::Array2::zeros((4, 4));
        p[[0, 0]] = 1.0;
        assert_eq!(display_shift(&p)[[2, 2]], 1.0);
        let mut q = ndarray::Array2::zeros((5, 5));
        q[[0, 0]] = 1.0;
        assert_eq!(display_shift(&q)[[2, 2]], 1.0);
    }
}
