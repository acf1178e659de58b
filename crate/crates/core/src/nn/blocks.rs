//! Residual units and the Dense Residual Attention fusion.
//!
//! At each decoder scale the decoder map `F_d` and the same-resolution
//! encoder map `F_e` are fused in three steps:
//!
//! 1. `F_c = conv1x1([F_d, F_e])`, reducing back to `C_e` channels;
//! 2. `F_a = F_c + sigmoid(F_e) * F_c`, a gate with no parameters of its own;
//! 3. `F_out = [F_a, p]`, the conditioning pictogram resized to this scale.

use super::{Activation, Bound, Conv2d, ParamSet};
use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Scalar;

/// `x + conv2(act(conv1(x)))`, both convolutions 3x3 with "same" padding.
#[derive(Debug, Clone)]
pub struct ResidualUnit {
    pub conv1: Conv2d,
    pub conv2: Conv2d,
    pub activation: Activation,
}

impl ResidualUnit {
    pub fn new<T: Scalar>(
        params: &mut ParamSet<T>,
        rng: &mut Rng,
        name: &str,
        channels: usize,
        activation: Activation,
    ) -> Self {
        Self {
            conv1: Conv2d::new(params, rng, &format!("{name}.conv1"), channels, channels, 3, 1, 1.0),
            // small residual branch at init keeps deep stacks near identity
            conv2: Conv2d::new(params, rng, &format!("{name}.conv2"), channels, channels, 3, 1, 0.2),
            activation,
        }
    }

    pub fn channels(&self) -> usize {
        self.conv1.in_channels
    }
}

pub fn residual_unit_forward<T: Scalar>(
    x: &Var<T>,
    unit: &ResidualUnit,
    bound: &Bound<T>,
) -> Result<Var<T>> {
    let c = x.shape().get(1).copied().unwrap_or(0);
    if c != unit.channels() {
        return Err(Error::invalid(
            "residual_unit",
            format!("input has {c} channels, unit expects {}", unit.channels()),
        ));
    }
    let h = unit.activation.apply(&unit.conv1.forward(bound, x)?);
    x.add(&unit.conv2.forward(bound, &h)?)
}

/// The 1x1 channel-reduction convolution of one fusion point.
#[derive(Debug, Clone)]
pub struct DraModule {
    pub fuse: Conv2d,
}

impl DraModule {
    pub fn new<T: Scalar>(
        params: &mut ParamSet<T>,
        rng: &mut Rng,
        name: &str,
        decoder_channels: usize,
        encoder_channels: usize,
    ) -> Self {
        Self {
            fuse: Conv2d::new(
                params,
                rng,
                &format!("{name}.fuse"),
                decoder_channels + encoder_channels,
                encoder_channels,
                1,
                1,
                1.0,
            ),
        }
    }
}

/// Concatenates `[F_d, F_e]` and reduces to the encoder channel count.
pub fn dense_fuse<T: Scalar>(
    f_d: &Var<T>,
    f_e: &Var<T>,
    dra: &DraModule,
    bound: &Bound<T>,
) -> Result<Var<T>> {
    let (sd, se) = (f_d.shape(), f_e.shape());
    if sd.len() != 4 || se.len() != 4 {
        return Err(Error::invalid("dense_fuse", "feature maps must be [N,C,H,W]"));
    }
    let (cd, ce) = (sd[1], se[1]);
    if dra.fuse.in_channels != cd + ce || dra.fuse.out_channels != ce {
        return Err(Error::invalid(
            "dense_fuse",
            format!(
                "fusion maps {} -> {} channels, inputs need {} -> {}",
                dra.fuse.in_channels,
                dra.fuse.out_channels,
                cd + ce,
                ce
            ),
        ));
    }
    dra.fuse.forward(bound, &f_d.concat_channels(f_e)?)
}

/// `F_c + sigmoid(F_e) * F_c`.
pub fn residual_attention<T: Scalar>(f_c: &Var<T>, f_e: &Var<T>) -> Result<Var<T>> {
    f_c.add(&f_e.sigmoid().mul(f_c)?)
}

/// Appends the pictogram, bilinearly resized to the map's spatial size.
pub fn attach_pictogram<T: Scalar>(f_a: &Var<T>, pictogram: &Var<T>) -> Result<Var<T>> {
    let shape = f_a.shape();
    if shape.len() != 4 {
        return Err(Error::invalid("attach_pictogram", "feature map must be [N,C,H,W]"));
    }
    let p = pictogram.shape();
    if p.len() != 4 || p[0] != shape[0] || p[1] != 3 {
        return Err(Error::shape("attach_pictogram", &[shape[0], 3, shape[2], shape[3]], &p));
    }
    f_a.concat_channels(&pictogram.resize_bilinear(shape[2], shape[3])?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;
    use crate::tensor::Tensor;

    fn fuse_set(cd: usize, ce: usize, seed: u64) -> (ParamSet<f64>, DraModule) {
        let mut params = ParamSet::new();
        let dra = DraModule::new(&mut params, &mut Rng::new(seed), "dra", cd, ce);
        (params, dra)
    }

    #[test]
    fn fuse_output_has_encoder_channels() {
        let mut rng = Rng::new(1);
        for _ in 0..10 {
            let (cd, ce) = (1 + rng.below(6), 1 + rng.below(6));
            let (params, dra) = fuse_set(cd, ce, 2);
            let tape = Tape::new();
            let b = params.bind(&tape);
            let fd = tape.constant(rng.normal_tensor(&[2, cd, 5, 5], 1.0));
            let fe = tape.constant(rng.normal_tensor(&[2, ce, 5, 5], 1.0));
            assert_eq!(dense_fuse(&fd, &fe, &dra, &b).unwrap().shape(), vec![2, ce, 5, 5]);
        }
    }

    #[test]
    fn selection_weights_reproduce_encoder_map() {
        let (cd, ce) = (3, 2);
        let (mut params, dra) = fuse_set(cd, ce, 3);
        let mut w = Tensor::zeros(&[ce, cd + ce, 1, 1]);
        for o in 0..ce {
            w.data_mut()[o * (cd + ce) + cd + o] = 1.0;
        }
        *params.get_mut(dra.fuse.weight) = w;
        let tape = Tape::new();
        let b = params.bind(&tape);
        let mut rng = Rng::new(4);
        let fd = tape.constant(rng.normal_tensor(&[2, cd, 4, 4], 1.0));
        let fe = tape.constant(rng.normal_tensor(&[2, ce, 4, 4], 1.0));
        assert_eq!(*dense_fuse(&fd, &fe, &dra, &b).unwrap().value(), *fe.value());
    }

    #[test]
    fn fuse_matches_per_pixel_matrix_multiply() {
        let (cd, ce) = (3, 4);
        let (mut params, dra) = fuse_set(cd, ce, 5);
        *params.get_mut(dra.fuse.bias) = Rng::new(6).normal_tensor(&[ce], 1.0);
        let tape = Tape::new();
        let b = params.bind(&tape);
        let mut rng = Rng::new(7);
        let fd = rng.normal_tensor::<f64>(&[2, cd, 3, 5], 1.0);
        let fe = rng.normal_tensor::<f64>(&[2, ce, 3, 5], 1.0);
        let out = dense_fuse(&tape.constant(fd.clone()), &tape.constant(fe.clone()), &dra, &b)
            .unwrap()
            .value();
        let (w, bias) = (params.get(dra.fuse.weight), params.get(dra.fuse.bias));
        let plane = 15;
        for n in 0..2 {
            for px in 0..plane {
                let column: Vec<f64> = (0..cd)
                    .map(|c| fd.data()[(n * cd + c) * plane + px])
                    .chain((0..ce).map(|c| fe.data()[(n * ce + c) * plane + px]))
                    .collect();
                for o in 0..ce {
                    let expected: f64 = bias.data()[o]
                        + (0..cd + ce).map(|i| w.data()[o * (cd + ce) + i] * column[i]).sum::<f64>();
                    let got = out.data()[(n * ce + o) * plane + px];
                    assert!((got - expected).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn fuse_rejects_wrong_channel_arithmetic() {
        let (params, dra) = fuse_set(3, 2, 8);
        let tape = Tape::new();
        let b = params.bind(&tape);
        let fd = tape.constant(Tensor::<f64>::zeros(&[1, 4, 4, 4]));
        let fe = tape.constant(Tensor::<f64>::zeros(&[1, 2, 4, 4]));
        assert!(dense_fuse(&fd, &fe, &dra, &b).is_err());
    }

    #[test]
    fn attention_closed_forms() {
        let tape = Tape::new();
        let mut rng = Rng::new(9);
        let fc0 = rng.normal_tensor::<f64>(&[2, 3, 4, 4], 1.0);
        let fc = tape.constant(fc0.clone());
        let zero = tape.constant(Tensor::zeros(&[2, 3, 4, 4]));
        let out = residual_attention(&fc, &zero).unwrap().value();
        for (o, c) in out.data().iter().zip(fc0.data()) {
            assert_eq!(*o, 1.5 * c);
        }
        let big = tape.constant(Tensor::full(&[2, 3, 4, 4], 30.0));
        let out = residual_attention(&fc, &big).unwrap().value();
        for (o, c) in out.data().iter().zip(fc0.data()) {
            assert!((o - 2.0 * c).abs() <= 1e-6 * c.abs());
        }
    }

    #[test]
    fn attention_matches_scalar_loop() {
        let tape = Tape::new();
        let mut rng = Rng::new(10);
        let fc0 = rng.normal_tensor::<f64>(&[1, 2, 3, 3], 1.0);
        let fe0 = rng.normal_tensor::<f64>(&[1, 2, 3, 3], 2.0);
        let out = residual_attention(&tape.constant(fc0.clone()), &tape.constant(fe0.clone()))
            .unwrap()
            .value();
        for i in 0..fc0.len() {
            let (c, e) = (fc0.data()[i], fe0.data()[i]);
            let expected = c * (1.0 + 1.0 / (1.0 + (-e).exp()));
            assert!((out.data()[i] - expected).abs() < 1e-14);
        }
        let other = tape.constant(Tensor::zeros(&[1, 3, 3, 3]));
        assert!(residual_attention(&tape.constant(fc0), &other).is_err());
    }

    #[test]
    fn pictogram_attachment_at_each_scale() {
        let tape = Tape::new();
        let p0 = Tensor::<f64>::from_fn(&[1, 3, 80, 80], |i| ((i % 80) as f64) / 40.0 - 1.0);
        let p = tape.constant(p0.clone());
        let full = tape.constant(Tensor::zeros(&[1, 4, 80, 80]));
        let out = attach_pictogram(&full, &p).unwrap();
        assert_eq!(out.shape(), vec![1, 7, 80, 80]);
        assert_eq!(*out.slice_channels(4, 3).unwrap().value(), p0);

        let color = tape.constant(Tensor::from_fn(&[1, 3, 80, 80], |i| [0.2, -0.4, 0.9][i / 6400]));
        let small = tape.constant(Tensor::zeros(&[1, 2, 20, 20]));
        let attached = attach_pictogram(&small, &color).unwrap().slice_channels(2, 3).unwrap().value();
        for c in 0..3 {
            let expected = [0.2, -0.4, 0.9][c];
            assert!(attached.data()[c * 400..(c + 1) * 400].iter().all(|v| (v - expected).abs() < 1e-12));
        }

        let mid = tape.constant(Tensor::zeros(&[1, 2, 40, 40]));
        let attached = attach_pictogram(&mid, &p).unwrap().slice_channels(2, 3).unwrap().value();
        assert_eq!(*attached, *p.resize_bilinear(40, 40).unwrap().value());
    }

    #[test]
    fn residual_unit_with_zero_weights_is_identity() {
        let mut params = ParamSet::<f64>::new();
        let unit = ResidualUnit::new(&mut params, &mut Rng::new(1), "ru", 8, Activation::Relu);
        for t in params.tensors_mut() {
            t.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let tape = Tape::new();
        let b = params.bind(&tape);
        let x = tape.variable(Rng::new(2).normal_tensor(&[2, 8, 40, 40], 1.0));
        let y = residual_unit_forward(&x, &unit, &b).unwrap();
        assert_eq!(y.shape(), vec![2, 8, 40, 40]);
        assert_eq!(*y.value(), *x.value());
        let g = tape.backward(&y.sum()).unwrap().get(&x);
        assert!(g.data().iter().all(|&v| v == 1.0));

        let wrong = tape.constant(Tensor::zeros(&[1, 4, 8, 8]));
        assert!(residual_unit_forward(&wrong, &unit, &b).is_err());
    }
}
