//! Per-factor projection head: `y = l2(W2 · relu(W1 · z + b1))`.
//!
//! `W2` has no bias. Arithmetic is f64; head files store f32.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Uniform};

use crate::codec::{Reader, Writer};
use crate::linalg::{dot, norm};
use crate::{Factor, MeritError, Result};

pub const HEAD_MAGIC: &[u8; 8] = b"MERITHED";
pub const HEAD_VERSION: u32 = 1;

pub const DEFAULT_HIDDEN_DIM: usize = 512;
pub const DEFAULT_OUT_DIM: usize = 128;

/// Normalization guard on `‖W2 h‖`.
pub const NORM_EPS: f64 = 1e-12;

/// Allowed deviation from unit norm for inputs to [`similarity`].
pub const UNIT_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct HeadParams {
    pub factor: Factor,
    pub in_dim: usize,
    pub hidden_dim: usize,
    pub out_dim: usize,
    /// `hidden × in`, row-major.
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    /// `out × hidden`, row-major.
    pub w2: Vec<f64>,
}

/// Glorot-uniform weights, zero hidden bias.
pub fn init_head(in_dim: usize, hidden_dim: usize, out_dim: usize, factor: Factor, seed: u64) -> Result<HeadParams> {
    if in_dim == 0 || hidden_dim == 0 || out_dim == 0 {
        return Err(MeritError::config("head dims must be >= 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut glorot = |fan_in: usize, fan_out: usize| -> Vec<f64> {
        let bound = glorot_bound(fan_in, fan_out);
        let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
        (0..fan_in * fan_out).map(|_| dist.sample(&mut rng)).collect()
    };
    let w1 = glorot(in_dim, hidden_dim);
    let w2 = glorot(hidden_dim, out_dim);
    Ok(HeadParams {
        factor,
        in_dim,
        hidden_dim,
        out_dim,
        w1,
        b1: vec![0.0; hidden_dim],
        w2,
    })
}

pub fn glorot_bound(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    pub a1: Vec<f64>,
    pub h: Vec<f64>,
    pub u: Vec<f64>,
    pub norm: f64,
    pub y: Vec<f64>,
}

impl HeadParams {
    pub fn w1_row(&self, r: usize) -> &[f64] {
        &self.w1[r * self.in_dim..(r + 1) * self.in_dim]
    }

    pub fn w2_row(&self, r: usize) -> &[f64] {
        &self.w2[r * self.hidden_dim..(r + 1) * self.hidden_dim]
    }

    pub fn check(&self) -> Result<()> {
        if self.w1.len() != self.hidden_dim * self.in_dim {
            return Err(MeritError::dim(self.hidden_dim * self.in_dim, self.w1.len(), "W1"));
        }
        if self.b1.len() != self.hidden_dim {
            return Err(MeritError::dim(self.hidden_dim, self.b1.len(), "b1"));
        }
        if self.w2.len() != self.out_dim * self.hidden_dim {
            return Err(MeritError::dim(self.out_dim * self.hidden_dim, self.w2.len(), "W2"));
        }
        if self.w1.iter().chain(&self.b1).chain(&self.w2).any(|x| !x.is_finite()) {
            return Err(MeritError::NonFinite("head parameters".into()));
        }
        Ok(())
    }

    pub fn num_params(&self) -> usize {
        self.w1.len() + self.b1.len() + self.w2.len()
    }
}

/// Full forward pass keeping every intermediate for backpropagation.
pub fn forward(params: &HeadParams, z: &[f64]) -> Result<ForwardTrace> {
    if z.len() != params.in_dim {
        return Err(MeritError::dim(params.in_dim, z.len(), "head input"));
    }
    if z.iter().any(|x| !x.is_finite()) {
        return Err(MeritError::NonFinite("head input".into()));
    }
    let a1: Vec<f64> = (0..params.hidden_dim)
        .map(|r| dot(params.w1_row(r), z) + params.b1[r])
        .collect();
    let h: Vec<f64> = a1.iter().map(|&a| a.max(0.0)).collect();
    let u: Vec<f64> = (0..params.out_dim).map(|r| dot(params.w2_row(r), &h)).collect();
    let n = norm(&u);
    if n.is_nan() || n < NORM_EPS {
        return Err(MeritError::DegenerateOutput {
            norm: n,
            eps: NORM_EPS,
            context: String::new(),
        });
    }
    let y = u.iter().map(|x| x / n).collect();
    Ok(ForwardTrace { a1, h, u, norm: n, y })
}

/// Cosine similarity of two unit vectors.
pub fn similarity(ya: &[f64], yb: &[f64]) -> Result<f64> {
    if ya.len() != yb.len() {
        return Err(MeritError::dim(ya.len(), yb.len(), "similarity operands"));
    }
    for v in [ya, yb] {
        let n = norm(v);
        if (n - 1.0).abs() > UNIT_TOLERANCE {
            return Err(MeritError::input(format!("similarity operand has norm {n}, expected 1")));
        }
    }
    Ok(dot(ya, yb))
}

/// Anything that maps an encoder embedding to a unit vector whose dot
/// products are similarities.
pub trait Projector {
    fn out_dim(&self) -> usize;
    fn project(&self, z: &[f64]) -> Result<Vec<f64>>;
}

impl Projector for HeadParams {
    fn out_dim(&self) -> usize {
        self.out_dim
    }

    fn project(&self, z: &[f64]) -> Result<Vec<f64>> {
        forward(self, z).map(|t| t.y)
    }
}

/// Identity "head": cosine similarity on the raw embedding.
#[derive(Debug, Clone, Copy)]
pub struct RawCosine {
    pub dim: usize,
}

impl Projector for RawCosine {
    fn out_dim(&self) -> usize {
        self.dim
    }

    fn project(&self, z: &[f64]) -> Result<Vec<f64>> {
        if z.len() != self.dim {
            return Err(MeritError::dim(self.dim, z.len(), "raw embedding"));
        }
        crate::linalg::l2_normalized(z, NORM_EPS).ok_or(MeritError::DegenerateOutput {
            norm: norm(z),
            eps: NORM_EPS,
            context: "raw embedding".into(),
        })
    }
}

pub fn encode_head(params: &HeadParams) -> Result<Vec<u8>> {
    params.check()?;
    let mut w = Writer::new();
    w.bytes(HEAD_MAGIC);
    w.u32(HEAD_VERSION);
    w.u32(params.factor.tag());
    w.u32(params.in_dim as u32);
    w.u32(params.hidden_dim as u32);
    w.u32(params.out_dim as u32);
    for m in [&params.w1, &params.b1, &params.w2] {
        w.f32s(m.iter().map(|&x| x as f32));
    }
    Ok(w.buf)
}

pub fn decode_head(bytes: &[u8]) -> Result<HeadParams> {
    let mut r = Reader::new(bytes);
    r.magic(HEAD_MAGIC)?;
    let version = r.u32("version")?;
    if version != HEAD_VERSION {
        return Err(MeritError::UnsupportedVersion(version));
    }
    let factor = Factor::from_tag(r.u32("factor")?)?;
    let in_dim = r.u32("in_dim")? as usize;
    let hidden_dim = r.u32("hidden_dim")? as usize;
    let out_dim = r.u32("out_dim")? as usize;
    if in_dim == 0 || hidden_dim == 0 || out_dim == 0 {
        return Err(MeritError::InvalidHeader("zero head dimension".into()));
    }
    let mut read = |n: usize, what: &str| -> Result<Vec<f64>> {
        Ok(r.f32s(n, what)?.into_iter().map(f64::from).collect())
    };
    let w1 = read(hidden_dim * in_dim, "W1")?;
    let b1 = read(hidden_dim, "b1")?;
    let w2 = read(out_dim * hidden_dim, "W2")?;
    if r.remaining() != 0 {
        return Err(MeritError::InvalidHeader(format!("{} trailing bytes", r.remaining())));
    }
    let params = HeadParams {
        factor,
        in_dim,
        hidden_dim,
        out_dim,
        w1,
        b1,
        w2,
    };
    params.check()?;
    Ok(params)
}

/// Writes the head; parameters are rounded to f32.
pub fn save_head(params: &HeadParams, path: &Path) -> Result<()> {
    let bytes = encode_head(params)?;
    fs::write(path, bytes).map_err(|e| MeritError::io(path, e))
}

pub fn load_head(path: &Path) -> Result<HeadParams> {
    let bytes = fs::read(path).map_err(|e| MeritError::io(path, e))?;
    decode_head(&bytes)
}

/// Expected head shape; `None` fields are not checked.
#[derive(Debug, Clone, Copy, Default)]
pub struct HeadShape {
    pub in_dim: Option<usize>,
    pub hidden_dim: Option<usize>,
    pub out_dim: Option<usize>,
}

pub fn load_head_expecting(path: &Path, shape: HeadShape) -> Result<HeadParams> {
    let params = load_head(path)?;
    let checks = [
        (shape.in_dim, params.in_dim, "head in_dim"),
        (shape.hidden_dim, params.hidden_dim, "head hidden_dim"),
        (shape.out_dim, params.out_dim, "head out_dim"),
    ];
    for (want, got, what) in checks {
        if let Some(w) = want {
            if w != got {
                return Err(MeritError::dim(w, got, what));
            }
        }
    }
    Ok(params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn identity_head() -> HeadParams {
        HeadParams {
            factor: Factor::Melody,
            in_dim: 2,
            hidden_dim: 2,
            out_dim: 2,
            w1: vec![1.0, 0.0, 0.0, 1.0],
            b1: vec![0.0, 0.0],
            w2: vec![1.0, 0.0, 0.0, 1.0],
        }
    }

    #[test]
    fn identity_head_normalizes_3_4() {
        let t = forward(&identity_head(), &[3.0, 4.0]).unwrap();
        assert_eq!(t.u, vec![3.0, 4.0]);
        assert_eq!(t.norm, 5.0);
        assert!((t.y[0] - 0.6).abs() < 1e-15 && (t.y[1] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn zero_first_layer_is_degenerate() {
        let mut p = identity_head();
        p.w1 = vec![0.0; 4];
        assert!(matches!(forward(&p, &[3.0, 4.0]), Err(MeritError::DegenerateOutput { .. })));
    }

    #[test]
    fn init_is_seeded_and_bounded() {
        let a = init_head(64, 32, 8, Factor::Rhythm, 5).unwrap();
        assert_eq!(a, init_head(64, 32, 8, Factor::Rhythm, 5).unwrap());
        assert_ne!(a, init_head(64, 32, 8, Factor::Rhythm, 6).unwrap());
        assert!(a.b1.iter().all(|&b| b == 0.0));
        let bound = glorot_bound(64, 32);
        assert!(a.w1.iter().all(|w| w.abs() <= bound));
        assert!(init_head(0, 3, 3, Factor::Melody, 0).is_err());
    }

    #[test]
    fn default_w1_bound() {
        let b = glorot_bound(5120, 512);
        assert!((b - 0.032_639).abs() < 1e-5, "{b}");
        let p = init_head(5120, 512, 128, Factor::Timbre, 1).unwrap();
        assert!(p.w1.iter().all(|w| w.abs() <= b));
    }

    #[test]
    fn similarity_landmarks() {
        let y = vec![0.6, 0.8];
        assert!((similarity(&y, &y).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(similarity(&y, &[-0.8, 0.6]).unwrap(), 0.0);
        assert_eq!(similarity(&y, &[-0.6, -0.8]).unwrap(), -1.0);
        assert!(similarity(&y, &[1.0, 1.0]).is_err());
    }

    #[test]
    fn head_file_errors() {
        let p = init_head(16, 8, 4, Factor::Melody, 2).unwrap();
        let mut bytes = encode_head(&p).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("h.bin");
        fs::write(&path, &bytes).unwrap();
        let want = HeadShape { hidden_dim: Some(4), ..Default::default() };
        assert!(matches!(load_head_expecting(&path, want), Err(MeritError::DimMismatch { .. })));
        bytes[0] = b'Y';
        assert!(matches!(decode_head(&bytes), Err(MeritError::BadMagic { .. })));
    }

    #[test]
    fn raw_cosine_normalizes() {
        let r = RawCosine { dim: 2 };
        assert_eq!(r.project(&[0.0, 2.0]).unwrap(), vec![0.0, 1.0]);
        assert!(r.project(&[0.0, 0.0]).is_err());
    }

    fn small_head(seed: u64) -> HeadParams {
        init_head(6, 5, 3, Factor::Melody, seed).unwrap()
    }

    proptest! {
        #[test]
        fn output_is_unit_norm(seed in any::<u64>(), z in prop::collection::vec(-10.0f64..10.0, 6)) {
            let p = small_head(seed);
            if let Ok(t) = forward(&p, &z) {
                prop_assert!((norm(&t.y) - 1.0).abs() < 1e-9);
            }
        }

        #[test]
        fn positive_scaling_leaves_output_unchanged_without_bias(
            seed in any::<u64>(), z in prop::collection::vec(-10.0f64..10.0, 6), c in 0.01f64..100.0
        ) {
            let p = small_head(seed);
            let scaled: Vec<f64> = z.iter().map(|x| c * x).collect();
            if let (Ok(a), Ok(b)) = (forward(&p, &z), forward(&p, &scaled)) {
                for (x, y) in a.y.iter().zip(&b.y) {
                    prop_assert!((x - y).abs() < 1e-12);
                }
            }
        }

        #[test]
        fn save_load_is_identity_on_f32_params(seed in any::<u64>()) {
            let mut p = small_head(seed);
            for x in p.w1.iter_mut().chain(p.b1.iter_mut()).chain(p.w2.iter_mut()) {
                *x = *x as f32 as f64;
            }
            p.b1[0] = 0.125;
            let bytes = encode_head(&p).unwrap();
            let back = decode_head(&bytes).unwrap();
            prop_assert_eq!(&back, &p);
            prop_assert_eq!(encode_head(&back).unwrap(), bytes);
        }
    }
}
