use crate::error::{Error, Result};
use crate::tensor::{Shape5, Tensor5};

/// Mean over `(T, H, W)`; output shape `(N, C, 1, 1, 1)`.
pub fn global_avg_pool(input: &Tensor5) -> Result<Tensor5> {
    let s = input.shape();
    let vol = s.volume();
    if vol == 0 {
        return Err(Error::InvalidConfig("global_avg_pool over an empty volume".into()));
    }
    let mut out = Tensor5::zeros((s.n, s.c, 1, 1, 1))?;
    for n in 0..s.n {
        for c in 0..s.c {
            out.data_mut()[n * s.c + c] = input.channel(n, c).iter().sum::<f64>() / vol as f64;
        }
    }
    Ok(out)
}

pub fn global_avg_pool_backward(out_grad: &Tensor5, input_shape: Shape5) -> Result<Tensor5> {
    let s = input_shape;
    let expected = Shape5::new(s.n, s.c, 1, 1, 1);
    if out_grad.shape() != expected {
        return Err(Error::ShapeMismatch { expected, actual: out_grad.shape() });
    }
    let vol = s.volume() as f64;
    let mut dx = Tensor5::zeros(s)?;
    for n in 0..s.n {
        for c in 0..s.c {
            let g = out_grad.data()[n * s.c + c] / vol;
            dx.channel_mut(n, c).iter_mut().for_each(|v| *v = g);
        }
    }
    Ok(dx)
}

/// 2x2 spatial max pooling with stride 2, temporal axis untouched. Output
/// is `ceil(H/2) x ceil(W/2)`; edge windows are clipped. Returns the pooled
/// tensor and the flat input index of each selected maximum.
pub fn spatial_maxpool2(input: &Tensor5) -> Result<(Tensor5, Vec<usize>)> {
    let s = input.shape();
    let os = Shape5::new(s.n, s.c, s.t, s.h.div_ceil(2), s.w.div_ceil(2));
    let mut out = Tensor5::zeros(os)?;
    let mut argmax = vec![0usize; os.numel()];
    let x = input.data();
    let mut o = 0;
    for n in 0..s.n {
        for c in 0..s.c {
            for t in 0..s.t {
                for ho in 0..os.h {
                    for wo in 0..os.w {
                        let mut best = f64::NEG_INFINITY;
                        let mut best_i = 0;
                        for hi in 2 * ho..(2 * ho + 2).min(s.h) {
                            for wi in 2 * wo..(2 * wo + 2).min(s.w) {
                                let i = input.offset(n, c, t, hi, wi);
                                if x[i] > best {
                                    best = x[i];
                                    best_i = i;
                                }
                            }
                        }
                        out.data_mut()[o] = best;
                        argmax[o] = best_i;
                        o += 1;
                    }
                }
            }
        }
    }
    Ok((out, argmax))
}

pub fn spatial_maxpool2_backward(out_grad: &Tensor5, argmax: &[usize], input_shape: Shape5) -> Result<Tensor5> {
    if out_grad.len() != argmax.len() {
        return Err(Error::Format("maxpool argmax length does not match gradient".into()));
    }
    let mut dx = Tensor5::zeros(input_shape)?;
    let d = dx.data_mut();
    for (&g, &i) in out_grad.data().iter().zip(argmax) {
        d[i] += g;
    }
    Ok(dx)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pooling_values() {
        let c = Tensor5::fill((1, 2, 2, 3, 3), 1.7).unwrap();
        assert!(global_avg_pool(&c).unwrap().data().iter().all(|&v| (v - 1.7).abs() < 1e-15));
        let x = Tensor5::from_vec((1, 1, 2, 2, 2), (1..=8).map(f64::from).collect()).unwrap();
        assert_eq!(global_avg_pool(&x).unwrap().data(), &[4.5]);
        let m = Tensor5::from_vec((1, 1, 1, 2, 2), vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(spatial_maxpool2(&m).unwrap().0.data(), &[4.0]);
    }

    #[test]
    fn maxpool_odd_sizes_and_backward() {
        let x = Tensor5::from_vec((1, 1, 1, 3, 3), (1..=9).map(f64::from).collect()).unwrap();
        let (y, idx) = spatial_maxpool2(&x).unwrap();
        assert_eq!(y.shape(), Shape5::new(1, 1, 1, 2, 2));
        assert_eq!(y.data(), &[5.0, 6.0, 8.0, 9.0]);
        let g = Tensor5::fill(y.shape(), 1.0).unwrap();
        let dx = spatial_maxpool2_backward(&g, &idx, x.shape()).unwrap();
        assert_eq!(dx.data(), &[0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 0.0, 1.0, 1.0]);
    }
}
