//! Training-only spatial weighting of critic inputs.

use std::cell::Cell;

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

thread_local! {
    static APPLY_MASK_CALLS: Cell<u64> = const { Cell::new(0) };
}

/// Number of [`apply_mask`] calls made on this thread.
pub fn apply_mask_invocations() -> u64 {
    APPLY_MASK_CALLS.with(Cell::get)
}

pub fn reset_apply_mask_invocations() {
    APPLY_MASK_CALLS.with(|c| c.set(0));
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskShape {
    Circular,
    Rectangular,
    /// No masking: every weight is 1 at every iteration.
    None,
}

impl std::str::FromStr for MaskShape {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "circular" => Ok(MaskShape::Circular),
            "rectangular" => Ok(MaskShape::Rectangular),
            "none" => Ok(MaskShape::None),
            other => Err(Error::Config(format!("unknown mask shape {other:?}"))),
        }
    }
}

impl std::fmt::Display for MaskShape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            MaskShape::Circular => "circular",
            MaskShape::Rectangular => "rectangular",
            MaskShape::None => "none",
        })
    }
}

/// Object circle in pixel coordinates, pixel `(i, j)` centered at `(x=j, y=i)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Circle {
    pub cx: f64,
    pub cy: f64,
    pub r: f64,
}

impl Circle {
    /// The same circle on a grid resized from `from` to `to` pixels.
    pub fn rescaled(&self, from: usize, to: usize) -> Circle {
        let s = to as f64 / from as f64;
        Circle {
            cx: (self.cx + 0.5) * s - 0.5,
            cy: (self.cy + 0.5) * s - 0.5,
            r: self.r * s,
        }
    }
}

/// Outside intensity ramps linearly from 1 at iteration 0 to `floor` at
/// `ramp_iterations`, then stays there.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MaskSchedule {
    pub shape: MaskShape,
    pub floor: f64,
    pub ramp_iterations: usize,
}

impl MaskSchedule {
    pub fn outside_intensity(&self, iteration: usize) -> f64 {
        if self.shape == MaskShape::None {
            return 1.0;
        }
        if iteration == 0 {
            return 1.0;
        }
        if iteration >= self.ramp_iterations {
            return self.floor;
        }
        let remaining = 1.0 - iteration as f64 / self.ramp_iterations as f64;
        (self.floor + (1.0 - self.floor) * remaining).clamp(self.floor, 1.0)
    }

    pub fn spec(&self, circle: Circle) -> MaskSpec {
        MaskSpec {
            shape: self.shape,
            circle,
            floor: self.floor,
            ramp_iterations: self.ramp_iterations,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MaskSpec {
    pub shape: MaskShape,
    pub circle: Circle,
    pub floor: f64,
    pub ramp_iterations: usize,
}

impl MaskSpec {
    pub fn schedule(&self) -> MaskSchedule {
        MaskSchedule {
            shape: self.shape,
            floor: self.floor,
            ramp_iterations: self.ramp_iterations,
        }
    }
}

/// `[1,1,H,W]` weights: exactly 1 inside the object region, the scheduled
/// intensity elsewhere.
pub fn make_mask<T: Scalar>(spec: &MaskSpec, iteration: usize, h: usize, w: usize) -> Result<Tensor<T>> {
    let Circle { cx, cy, r } = spec.circle;
    if !(r > 0.0) {
        return Err(Error::invalid("make_mask", format!("radius must be positive, got {r}")));
    }
    if !(0.0..=(w as f64 - 1.0)).contains(&cx) || !(0.0..=(h as f64 - 1.0)).contains(&cy) {
        return Err(Error::invalid("make_mask", format!("center ({cx}, {cy}) outside {w}x{h}")));
    }
    if !(0.0..=1.0).contains(&spec.floor) {
        return Err(Error::invalid("make_mask", "floor must lie in [0, 1]"));
    }
    let outside = T::from_f64_lossy(spec.schedule().outside_intensity(iteration));
    let inside = |y: f64, x: f64| match spec.shape {
        MaskShape::Circular => (x - cx).powi(2) + (y - cy).powi(2) <= r * r,
        MaskShape::Rectangular => (x - cx).abs() <= r && (y - cy).abs() <= r,
        MaskShape::None => true,
    };
    Ok(Tensor::from_fn(&[1, 1, h, w], |i| {
        if inside((i / w) as f64, (i % w) as f64) {
            T::one()
        } else {
            outside
        }
    }))
}

/// Hadamard product with a `[1,1,H,W]` or `[N,1,H,W]` mask broadcast over
/// channels.
pub fn apply_mask<T: Scalar>(y: &Var<T>, mask: &Tensor<T>) -> Result<Var<T>> {
    APPLY_MASK_CALLS.with(|c| c.set(c.get() + 1));
    let (n, c, h, w) = y.value().dims4("apply_mask")?;
    let ms = mask.shape();
    if ms.len() != 4 || !(ms[0] == 1 || ms[0] == n) || ms[1] != 1 || ms[2] != h || ms[3] != w {
        return Err(Error::shape("apply_mask", &[n, 1, h, w], ms));
    }
    let plane = h * w;
    let per_sample = ms[0] == n;
    let full = Tensor::from_fn(&[n, c, h, w], |i| {
        let sample = if per_sample { i / (c * plane) } else { 0 };
        mask.data()[sample * plane + i % plane]
    });
    y.mul_const(&full)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;
    use crate::rng::Rng;

    fn spec(shape: MaskShape) -> MaskSpec {
        MaskSpec {
            shape,
            circle: Circle {
                cx: 40.0,
                cy: 38.0,
                r: 20.0,
            },
            floor: 0.1,
            ramp_iterations: 1000,
        }
    }

    #[test]
    fn iteration_zero_is_all_ones() {
        for shape in [MaskShape::Circular, MaskShape::Rectangular, MaskShape::None] {
            let m = make_mask::<f64>(&spec(shape), 0, 80, 80).unwrap();
            assert!(m.data().iter().all(|&v| v == 1.0));
        }
    }

    #[test]
    fn after_ramp_outside_is_floor() {
        let s = spec(MaskShape::Circular);
        for it in [1000, 5000] {
            let m = make_mask::<f64>(&s, it, 80, 80).unwrap();
            assert_eq!(m.data()[38 * 80 + 40], 1.0);
            assert_eq!(m.data()[0], 0.1);
            assert!(m.data().iter().all(|&v| v == 1.0 || v == 0.1));
        }
        let half = make_mask::<f64>(&s, 500, 80, 80).unwrap();
        assert!((half.data()[0] - 0.55).abs() < 1e-12);
    }

    #[test]
    fn schedule_is_monotone_and_bounded() {
        let s = spec(MaskShape::Circular).schedule();
        let mut prev = f64::INFINITY;
        for it in 0..2000 {
            let v = s.outside_intensity(it);
            assert!((0.1..=1.0).contains(&v) && v <= prev);
            prev = v;
        }
    }

    #[test]
    fn rejects_degenerate_geometry() {
        let mut s = spec(MaskShape::Circular);
        s.circle.r = 0.0;
        assert!(make_mask::<f64>(&s, 0, 80, 80).is_err());
        s.circle.r = 5.0;
        s.circle.cx = 90.0;
        assert!(make_mask::<f64>(&s, 0, 80, 80).is_err());
    }

    #[test]
    fn apply_mask_examples() {
        let tape = Tape::new();
        let y0 = Rng::new(3).normal_tensor::<f64>(&[2, 3, 8, 8], 1.0);
        let y = tape.constant(y0.clone());
        let ones = Tensor::ones(&[1, 1, 8, 8]);
        assert_eq!(*apply_mask(&y, &ones).unwrap().value(), y0);
        let zeros = Tensor::zeros(&[2, 1, 8, 8]);
        assert!(apply_mask(&y, &zeros).unwrap().value().data().iter().all(|&v| v == 0.0));

        let binary = Tensor::from_fn(&[1, 1, 8, 8], |i| if i % 3 == 0 { 1.0 } else { 0.0 });
        let once = apply_mask(&y, &binary).unwrap();
        let twice = apply_mask(&once, &binary).unwrap();
        assert_eq!(*once.value(), *twice.value());

        assert!(apply_mask(&y, &Tensor::ones(&[1, 1, 4, 4])).is_err());
    }

    #[test]
    fn counter_tracks_calls() {
        reset_apply_mask_invocations();
        let tape = Tape::new();
        let y = tape.constant(Tensor::<f32>::ones(&[1, 3, 4, 4]));
        apply_mask(&y, &Tensor::ones(&[1, 1, 4, 4])).unwrap();
        assert_eq!(apply_mask_invocations(), 1);
    }
}
