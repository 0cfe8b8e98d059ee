//! Brute-force nested-loop convolution, kept independent of the optimized
//! paths in [`super::conv`]. It serves as the correctness oracle and as the
//! instrumented multiply-accumulate counter behind empirical cost reports.

use super::conv::{ConvMode, ConvSpec};
use crate::error::Result;
use crate::tensor::{Shape5, Tensor5};

/// Visits every (output element, kernel tap) pair in loop order
/// `n, c_out, t, h, w, c_in, dt, dy, dx`. The input offset is `None` for
/// taps that land in the zero padding.
fn walk(input: Shape5, spec: &ConvSpec, mut visit: impl FnMut(usize, Option<usize>, usize)) -> Result<Shape5> {
    let out = spec.output_shape(input)?;
    let pt = (spec.t as isize - 1) / 2;
    let pk = (spec.k as isize - 1) / 2;
    let groups_in = spec.in_per_group();
    for n in 0..out.n {
        for co in 0..out.c {
            for to in 0..out.t {
                for ho in 0..out.h {
                    for wo in 0..out.w {
                        let o_off = (((n * out.c + co) * out.t + to) * out.h + ho) * out.w + wo;
                        for g in 0..groups_in {
                            let ci = if spec.mode == ConvMode::Depthwise { co } else { g };
                            for dt in 0..spec.t {
                                for dy in 0..spec.k {
                                    for dx in 0..spec.k {
                                        let ti = to as isize + dt as isize - pt;
                                        let hi = (ho * spec.stride) as isize + dy as isize - pk;
                                        let wi = (wo * spec.stride) as isize + dx as isize - pk;
                                        let inside = ti >= 0
                                            && hi >= 0
                                            && wi >= 0
                                            && (ti as usize) < input.t
                                            && (hi as usize) < input.h
                                            && (wi as usize) < input.w;
                                        let i_off = inside.then(|| {
                                            (((n * input.c + ci) * input.t + ti as usize) * input.h + hi as usize)
                                                * input.w
                                                + wi as usize
                                        });
                                        let w_off = (((co * groups_in + g) * spec.t + dt) * spec.k + dy) * spec.k + dx;
                                        visit(o_off, i_off, w_off);
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Direct evaluation of the convolution sum.
pub fn conv3d_naive(input: &Tensor5, spec: &ConvSpec, weight: &Tensor5) -> Result<Tensor5> {
    let spec = spec.validated()?;
    let x = input.data();
    let w = weight.data();
    let out = spec.output_shape(input.shape())?;
    let mut acc = vec![0.0; out.checked_numel()?];
    walk(input.shape(), &spec, |o, i, wi| {
        if let Some(i) = i {
            acc[o] += x[i] * w[wi];
        }
    })?;
    Tensor5::from_vec(out, acc)
}

/// Counts multiply-accumulates by walking the oracle loop nest.
pub fn count_conv_macs(input: Shape5, spec: &ConvSpec) -> Result<u64> {
    let mut macs = 0u64;
    walk(input, spec, |_, _, _| macs += 1)?;
    Ok(macs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ops::conv::{conv3d_forward, ConvLayer};
    use crate::tensor::Rng;

    #[test]
    fn full_conv_matches_optimized_path() {
        let mut rng = Rng::new(11);
        let spec = ConvSpec::full(4, 3, 3, 3, 1).unwrap();
        let layer = ConvLayer::new(spec, &mut rng).unwrap();
        let x = Tensor5::randn((1, 4, 5, 6, 6), 1.0, &mut rng).unwrap();
        let fast = conv3d_forward(&x, &layer).unwrap();
        let slow = conv3d_naive(&x, &spec, &layer.weight).unwrap();
        for (a, b) in fast.data().iter().zip(slow.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn counter_matches_dense_formula() {
        let spec = ConvSpec::depthwise(5, 3, 3, 2).unwrap();
        let input = Shape5::new(2, 5, 4, 7, 6);
        // Ho = 4, Wo = 3
        assert_eq!(count_conv_macs(input, &spec).unwrap(), 2 * 5 * 27 * 4 * 4 * 3);
    }
}
