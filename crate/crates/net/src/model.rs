//! Parameters, forward pass and backpropagation of the segmentation network.

use ndarray::{Array1, Array2};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::arch::{ArchSpec, LayerKind, LayerShape};
use crate::error::{NetError, Result};
use crate::ops::{self, Act, Scalar};

#[derive(Debug, Clone, PartialEq)]
pub struct Layer<T> {
    pub name: String,
    pub kind: LayerKind,
    pub c_in: usize,
    pub c_out: usize,
    /// Conv3: `(c_out, c_in·9)`; Up2: `(c_out·4, c_in)`; Out1: `(c_out, c_in)`.
    pub w: Array2<T>,
    pub b: Array1<T>,
}

impl<T: Scalar> Layer<T> {
    fn zeros(shape: &LayerShape) -> Self {
        let dims = match shape.kind {
            LayerKind::Conv3 => (shape.c_out, shape.c_in * 9),
            LayerKind::Up2 => (shape.c_out * 4, shape.c_in),
            LayerKind::Out1 => (shape.c_out, shape.c_in),
        };
        Self {
            name: shape.name.to_string(),
            kind: shape.kind,
            c_in: shape.c_in,
            c_out: shape.c_out,
            w: Array2::zeros(dims),
            b: Array1::zeros(shape.c_out),
        }
    }

    /// Logical weight shape as stored on disk: Conv3 `[c_out, c_in, 3, 3]`,
    /// Up2 `[c_out, 2, 2, c_in]`, Out1 `[c_out, c_in, 1, 1]`. Each is the
    /// row-major view of the in-memory matrix.
    pub fn weight_dims(&self) -> Vec<usize> {
        match self.kind {
            LayerKind::Conv3 => vec![self.c_out, self.c_in, 3, 3],
            LayerKind::Up2 => vec![self.c_out, 2, 2, self.c_in],
            LayerKind::Out1 => vec![self.c_out, self.c_in, 1, 1],
        }
    }

    fn fan_in(&self) -> usize {
        match self.kind {
            LayerKind::Conv3 => self.c_in * 9,
            // Each output pixel of a stride-2 2×2 transposed conv sees one tap per input channel.
            LayerKind::Up2 | LayerKind::Out1 => self.c_in,
        }
    }
}

/// Weights and biases keyed by layer name, in execution order.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet<T> {
    pub spec: ArchSpec,
    pub layers: Vec<Layer<T>>,
}

/// Seeded He-normal initialization, zero biases.
pub fn build_model<T: Scalar>(spec: &ArchSpec, seed: u64) -> Result<ParamSet<T>> {
    spec.validate()?;
    let mut rng = gridpoint_core::seed::rng(seed);
    let mut layers: Vec<Layer<T>> = spec.layers().iter().map(Layer::zeros).collect();
    for l in &mut layers {
        let std = (2.0 / l.fan_in() as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("positive std");
        l.w.mapv_inplace(|_| T::from_f64(normal.sample(&mut rng)).expect("finite"));
    }
    Ok(ParamSet { spec: spec.clone(), layers })
}

impl<T: Scalar> ParamSet<T> {
    pub fn zeros(spec: &ArchSpec) -> Result<Self> {
        spec.validate()?;
        Ok(Self {
            spec: spec.clone(),
            layers: spec.layers().iter().map(Layer::zeros).collect(),
        })
    }

    pub fn fingerprint(&self) -> String {
        self.spec.fingerprint()
    }

    pub fn layer(&self, name: &str) -> Option<&Layer<T>> {
        self.layers.iter().find(|l| l.name == name)
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.w.len() + l.b.len()).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ParamSet<U> {
        let c = |v: &T| U::from_f64(v.to_f64().expect("finite")).expect("finite");
        ParamSet {
            spec: self.spec.clone(),
            layers: self
                .layers
                .iter()
                .map(|l| Layer {
                    name: l.name.clone(),
                    kind: l.kind,
                    c_in: l.c_in,
                    c_out: l.c_out,
                    w: l.w.map(c),
                    b: l.b.map(c),
                })
                .collect(),
        }
    }

    /// Checks that the input is `in_channels` planes with both sides divisible by 8.
    pub fn check_input(&self, x: &Act<T>) -> Result<()> {
        let m = self.spec.size_multiple();
        if x.channels() != self.spec.in_channels {
            return Err(NetError::Shape(format!(
                "input has {} channels, the network expects {}",
                x.channels(),
                self.spec.in_channels
            )));
        }
        if x.h == 0 || x.w == 0 || x.h % m != 0 || x.w % m != 0 {
            return Err(NetError::Shape(format!(
                "input {}x{} must have both sides divisible by {m} (three 2x2 poolings)",
                x.w, x.h
            )));
        }
        Ok(())
    }
}

/// Gradients, laid out like the parameters.
pub type Grads<T> = ParamSet<T>;

/// Dropout source for a training-mode forward pass.
pub enum Mode<'a, R: Rng> {
    Infer,
    Train(&'a mut R),
}

/// Intermediate activations kept for backpropagation.
pub struct Cache<T> {
    x0: Act<T>,
    e1a: Act<T>,
    s1: Act<T>,
    idx1: Vec<u8>,
    p1: Act<T>,
    e2a: Act<T>,
    s2: Act<T>,
    idx2: Vec<u8>,
    p2: Act<T>,
    e3a: Act<T>,
    e3b: Act<T>,
    mask3: Option<Array2<T>>,
    s3: Act<T>,
    idx3: Vec<u8>,
    p3: Act<T>,
    ba: Act<T>,
    bb: Act<T>,
    mask_b: Option<Array2<T>>,
    bd: Act<T>,
    u3: Act<T>,
    d3: Act<T>,
    u2: Act<T>,
    d2: Act<T>,
    u1: Act<T>,
    d1: Act<T>,
    pen: Act<T>,
}

const ENC1A: usize = 0;
const ENC1B: usize = 1;
const ENC2A: usize = 2;
const ENC2B: usize = 3;
const ENC3A: usize = 4;
const ENC3B: usize = 5;
const BOTT_A: usize = 6;
const BOTT_B: usize = 7;
const UP3: usize = 8;
const DEC3: usize = 9;
const UP2: usize = 10;
const DEC2: usize = 11;
const UP1: usize = 12;
const DEC1: usize = 13;
const PENULT: usize = 14;
const OUTPUT: usize = 15;

fn conv_relu<T: Scalar>(p: &ParamSet<T>, i: usize, x: &Act<T>) -> Act<T> {
    let l = &p.layers[i];
    let mut y = ops::conv3(x, &l.w, &l.b);
    ops::relu_inplace(&mut y);
    y
}

fn up_relu<T: Scalar>(p: &ParamSet<T>, i: usize, x: &Act<T>) -> Act<T> {
    let l = &p.layers[i];
    let mut y = ops::upconv2(x, &l.w, &l.b);
    ops::relu_inplace(&mut y);
    y
}

fn dropout<T: Scalar, R: Rng>(x: &Act<T>, rate: f64, mode: &mut Mode<'_, R>) -> (Act<T>, Option<Array2<T>>) {
    match mode {
        Mode::Train(rng) if rate > 0.0 => {
            let m: Array2<T> = ops::dropout_mask(x.data.dim(), rate, *rng);
            (Act::new(&x.data * &m, x.n, x.h, x.w), Some(m))
        }
        _ => (x.clone(), None),
    }
}

/// Logits for a batch. With `keep` the activations needed by [`backward`]
/// are returned; otherwise intermediates are released as soon as possible.
pub fn forward_logits<T: Scalar, R: Rng>(
    p: &ParamSet<T>,
    x0: Act<T>,
    mut mode: Mode<'_, R>,
    keep: bool,
) -> Result<(Act<T>, Option<Cache<T>>)> {
    p.check_input(&x0)?;
    let spec = &p.spec;
    let e1a = conv_relu(p, ENC1A, &x0);
    let s1 = conv_relu(p, ENC1B, &e1a);
    let e1a = keep.then_some(e1a);
    let (p1, idx1) = ops::maxpool2(&s1);
    let e2a = conv_relu(p, ENC2A, &p1);
    let s2 = conv_relu(p, ENC2B, &e2a);
    let (p2, idx2) = ops::maxpool2(&s2);
    let e3a = conv_relu(p, ENC3A, &p2);
    let e3b = conv_relu(p, ENC3B, &e3a);
    let (s3, mask3) = dropout(&e3b, spec.dropout_enc3, &mut mode);
    let (p3, idx3) = ops::maxpool2(&s3);
    let ba = conv_relu(p, BOTT_A, &p3);
    let bb = conv_relu(p, BOTT_B, &ba);
    let (bd, mask_b) = dropout(&bb, spec.dropout_bottleneck, &mut mode);

    let u3 = up_relu(p, UP3, &bd);
    let d3 = conv_relu(p, DEC3, &ops::concat_channels(&u3, &s3));
    let u2 = up_relu(p, UP2, &d3);
    let d2 = conv_relu(p, DEC2, &ops::concat_channels(&u2, &s2));
    let u1 = up_relu(p, UP1, &d2);
    let m1 = ops::concat_channels(&u1, &s1);
    let u1 = keep.then_some(u1);
    let d1 = conv_relu(p, DEC1, &m1);
    drop(m1);
    let pen = conv_relu(p, PENULT, &d1);
    let out = &p.layers[OUTPUT];
    let logits = ops::conv1(&pen, &out.w, &out.b);
    if !keep {
        return Ok((logits, None));
    }
    let cache = Cache {
        x0,
        e1a: e1a.expect("kept"),
        s1,
        idx1,
        p1,
        e2a,
        s2,
        idx2,
        p2,
        e3a,
        e3b,
        mask3,
        s3,
        idx3,
        p3,
        ba,
        bb,
        mask_b,
        bd,
        u3,
        d3,
        u2,
        d2,
        u1: u1.expect("kept"),
        d1,
        pen,
    };
    Ok((logits, Some(cache)))
}

pub fn sigmoid<T: Scalar>(z: T) -> T {
    if z >= T::zero() {
        T::one() / (T::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (T::one() + e)
    }
}

/// Per-pixel grid probability, inference mode (no dropout).
pub fn forward<T: Scalar>(p: &ParamSet<T>, x: Act<T>) -> Result<Act<T>> {
    let (mut z, _) = forward_logits::<T, rand_chacha::ChaCha8Rng>(p, x, Mode::Infer, false)?;
    z.data.mapv_inplace(sigmoid);
    Ok(z)
}

fn conv_back<T: Scalar>(p: &ParamSet<T>, g: &mut Grads<T>, i: usize, x: &Act<T>, dout: &Array2<T>, need_dx: bool) -> Option<Array2<T>> {
    let (dx, dw, db) = ops::conv3_backward(x, &p.layers[i].w, dout, need_dx);
    g.layers[i].w = dw;
    g.layers[i].b = db;
    dx
}

fn up_back<T: Scalar>(p: &ParamSet<T>, g: &mut Grads<T>, i: usize, x: &Act<T>, dout: &Array2<T>) -> Array2<T> {
    let (dx, dw, db) = ops::upconv2_backward(x, &p.layers[i].w, dout);
    g.layers[i].w = dw;
    g.layers[i].b = db;
    dx
}

fn apply_mask<T: Scalar>(d: &mut Array2<T>, mask: &Option<Array2<T>>) {
    if let Some(m) = mask {
        *d *= m;
    }
}

/// Parameter gradients given the loss gradient with respect to the logits.
pub fn backward<T: Scalar>(p: &ParamSet<T>, c: &Cache<T>, dlogits: &Array2<T>) -> Grads<T> {
    let mut g = ParamSet::zeros(&p.spec).expect("spec already validated");
    let c1 = p.spec.enc_widths[0];
    let c2 = p.spec.enc_widths[1];
    let c3 = p.spec.enc_widths[2];

    let (mut d, dw, db) = ops::conv1_backward(&c.pen, &p.layers[OUTPUT].w, dlogits);
    g.layers[OUTPUT].w = dw;
    g.layers[OUTPUT].b = db;
    ops::relu_backward_inplace(&mut d, &c.pen.data);
    let mut d = conv_back(p, &mut g, PENULT, &c.d1, &d, true).expect("dx");
    ops::relu_backward_inplace(&mut d, &c.d1.data);

    let dm1 = conv_back(p, &mut g, DEC1, &ops::concat_channels(&c.u1, &c.s1), &d, true).expect("dx");
    let (mut du1, ds1_skip) = ops::split_channels(&dm1, c1);
    ops::relu_backward_inplace(&mut du1, &c.u1.data);
    let mut d = up_back(p, &mut g, UP1, &c.d2, &du1);
    ops::relu_backward_inplace(&mut d, &c.d2.data);

    let dm2 = conv_back(p, &mut g, DEC2, &ops::concat_channels(&c.u2, &c.s2), &d, true).expect("dx");
    let (mut du2, ds2_skip) = ops::split_channels(&dm2, c2);
    ops::relu_backward_inplace(&mut du2, &c.u2.data);
    let mut d = up_back(p, &mut g, UP2, &c.d3, &du2);
    ops::relu_backward_inplace(&mut d, &c.d3.data);

    let dm3 = conv_back(p, &mut g, DEC3, &ops::concat_channels(&c.u3, &c.s3), &d, true).expect("dx");
    let (mut du3, ds3_skip) = ops::split_channels(&dm3, c3);
    ops::relu_backward_inplace(&mut du3, &c.u3.data);
    let mut d = up_back(p, &mut g, UP3, &c.bd, &du3);

    apply_mask(&mut d, &c.mask_b);
    ops::relu_backward_inplace(&mut d, &c.bb.data);
    let mut d = conv_back(p, &mut g, BOTT_B, &c.ba, &d, true).expect("dx");
    ops::relu_backward_inplace(&mut d, &c.ba.data);
    let d = conv_back(p, &mut g, BOTT_A, &c.p3, &d, true).expect("dx");

    let mut ds3 = ops::maxpool2_backward(&d, &c.idx3, c.s3.n, c.s3.h, c.s3.w);
    ds3 += &ds3_skip;
    apply_mask(&mut ds3, &c.mask3);
    ops::relu_backward_inplace(&mut ds3, &c.e3b.data);
    let mut d = conv_back(p, &mut g, ENC3B, &c.e3a, &ds3, true).expect("dx");
    ops::relu_backward_inplace(&mut d, &c.e3a.data);
    let d = conv_back(p, &mut g, ENC3A, &c.p2, &d, true).expect("dx");

    let mut ds2 = ops::maxpool2_backward(&d, &c.idx2, c.s2.n, c.s2.h, c.s2.w);
    ds2 += &ds2_skip;
    ops::relu_backward_inplace(&mut ds2, &c.s2.data);
    let mut d = conv_back(p, &mut g, ENC2B, &c.e2a, &ds2, true).expect("dx");
    ops::relu_backward_inplace(&mut d, &c.e2a.data);
    let d = conv_back(p, &mut g, ENC2A, &c.p1, &d, true).expect("dx");

    let mut ds1 = ops::maxpool2_backward(&d, &c.idx1, c.s1.n, c.s1.h, c.s1.w);
    ds1 += &ds1_skip;
    ops::relu_backward_inplace(&mut ds1, &c.s1.data);
    let mut d = conv_back(p, &mut g, ENC1B, &c.e1a, &ds1, true).expect("dx");
    ops::relu_backward_inplace(&mut d, &c.e1a.data);
    conv_back(p, &mut g, ENC1A, &c.x0, &d, false);
    g
}

/// Batch of gray patches (0..=255) as a normalized single-channel input.
pub fn batch_input<T: Scalar>(images: &[&gridpoint_core::Gray]) -> Result<Act<T>> {
    let first = images.first().ok_or(NetError::Empty("batch"))?;
    let (h, w) = first.dim();
    let mut data = Vec::with_capacity(images.len() * h * w);
    for im in images {
        if im.dim() != (h, w) {
            return Err(NetError::Shape("batch images differ in size".into()));
        }
        data.extend(im.iter().map(|&v| T::from_f32(v / 255.0).expect("finite")));
    }
    let data = Array2::from_shape_vec((1, images.len() * h * w), data).expect("length checked");
    Ok(Act::new(data, images.len(), h, w))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_chacha::ChaCha8Rng;

    fn tiny() -> ArchSpec {
        ArchSpec::with_widths([2, 2, 2], 4)
    }

    fn input(n: usize, h: usize, w: usize) -> Act<f64> {
        let data = Array2::from_shape_fn((1, n * h * w), |(_, j)| ((j * 31) % 17) as f64 / 17.0);
        Act::new(data, n, h, w)
    }

    #[test]
    fn same_seed_same_params() {
        let a: ParamSet<f32> = build_model(&tiny(), 3).unwrap();
        let b: ParamSet<f32> = build_model(&tiny(), 3).unwrap();
        assert_eq!(a, b);
        let c: ParamSet<f32> = build_model(&tiny(), 4).unwrap();
        assert_ne!(a, c);
        assert_eq!(a.param_count(), tiny().param_count());
    }

    #[test]
    fn output_size_and_range() {
        let p: ParamSet<f64> = build_model(&tiny(), 1).unwrap();
        for (h, w) in [(8, 8), (16, 24), (64, 64)] {
            let y = forward(&p, input(2, h, w)).unwrap();
            assert_eq!((y.n, y.h, y.w, y.channels()), (2, h, w, 1));
            assert!(y.data.iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn rejects_indivisible_sizes() {
        let p: ParamSet<f64> = build_model(&tiny(), 1).unwrap();
        let err = forward(&p, input(1, 12, 16)).unwrap_err();
        assert!(err.to_string().contains("divisible by 8"), "{err}");
    }

    #[test]
    fn zero_output_layer_gives_half() {
        let mut p: ParamSet<f64> = build_model(&tiny(), 1).unwrap();
        p.layers[OUTPUT].w.fill(0.0);
        p.layers[OUTPUT].b.fill(0.0);
        let y = forward(&p, input(1, 16, 16)).unwrap();
        assert!(y.data.iter().all(|&v| v == 0.5));
    }

    #[test]
    fn inference_is_bit_stable_and_training_is_seeded() {
        let p: ParamSet<f32> = build_model(&tiny(), 9).unwrap();
        let x = input(1, 16, 16).data.mapv(|v| v as f32);
        let a = forward(&p, Act::new(x.clone(), 1, 16, 16)).unwrap();
        let b = forward(&p, Act::new(x.clone(), 1, 16, 16)).unwrap();
        assert_eq!(a, b);
        let run = |seed| {
            let mut rng = gridpoint_core::seed::rng(seed);
            forward_logits(&p, Act::new(x.clone(), 1, 16, 16), Mode::Train::<ChaCha8Rng>(&mut rng), false).unwrap().0
        };
        assert_eq!(run(5), run(5));
    }
}
