use super::{FlowField, GrayFrame};
use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// Side length of each flow component fed to the network.
pub const NET_INPUT_SIZE: usize = 28;

/// Variance floor used when standardizing a flow component.
pub const VARIANCE_FLOOR: f64 = 1e-6;

/// Things that can be resampled onto a new pixel grid.
pub trait Resample: Sized {
    fn resize_bilinear(&self, out_h: usize, out_w: usize) -> Result<Self>;
}

/// Bilinear resize with corner-aligned sampling: output corners coincide
/// with input corners. Flow values are interpolated, not rescaled.
pub fn resize_bilinear<R: Resample>(x: &R, out_h: usize, out_w: usize) -> Result<R> {
    x.resize_bilinear(out_h, out_w)
}

fn resize_plane(src: &[f32], h: usize, w: usize, out_h: usize, out_w: usize) -> Result<Vec<f32>> {
    if h < 2 || w < 2 {
        return Err(Error::Data(format!("cannot resize a degenerate {h}x{w} image")));
    }
    if out_h == 0 || out_w == 0 {
        return Err(Error::Data(format!("cannot resize to {out_h}x{out_w}")));
    }
    let ratio = |n_in: usize, n_out: usize| {
        if n_out > 1 {
            (n_in - 1) as f64 / (n_out - 1) as f64
        } else {
            0.0
        }
    };
    let (ry, rx) = (ratio(h, out_h), ratio(w, out_w));
    let mut out = Vec::with_capacity(out_h * out_w);
    for oy in 0..out_h {
        let sy = oy as f64 * ry;
        let y0 = (sy.floor() as usize).min(h - 2);
        let fy = sy - y0 as f64;
        for ox in 0..out_w {
            let sx = ox as f64 * rx;
            let x0 = (sx.floor() as usize).min(w - 2);
            let fx = sx - x0 as f64;
            let at = |y: usize, x: usize| f64::from(src[y * w + x]);
            let top = at(y0, x0) * (1.0 - fx) + at(y0, x0 + 1) * fx;
            let bottom = at(y0 + 1, x0) * (1.0 - fx) + at(y0 + 1, x0 + 1) * fx;
            out.push((top * (1.0 - fy) + bottom * fy) as f32);
        }
    }
    Ok(out)
}

impl Resample for GrayFrame {
    fn resize_bilinear(&self, out_h: usize, out_w: usize) -> Result<Self> {
        let px = resize_plane(self.pixels(), self.height(), self.width(), out_h, out_w)?;
        GrayFrame::new(out_h, out_w, px.into_iter().map(|p| p.clamp(0.0, 1.0)).collect())
    }
}

impl Resample for FlowField {
    fn resize_bilinear(&self, out_h: usize, out_w: usize) -> Result<Self> {
        let (h, w) = (self.height(), self.width());
        FlowField::new(
            out_h,
            out_w,
            resize_plane(self.u(), h, w, out_h, out_w)?,
            resize_plane(self.v(), h, w, out_h, out_w)?,
        )
    }
}

/// Zero-mean, unit-variance copy of one component.
pub fn standardize(values: &[f32]) -> Vec<f32> {
    let n = values.len() as f64;
    let mean = values.iter().map(|&x| f64::from(x)).sum::<f64>() / n;
    let var = values.iter().map(|&x| (f64::from(x) - mean).powi(2)).sum::<f64>() / n;
    let std = var.max(VARIANCE_FLOOR).sqrt();
    values.iter().map(|&x| ((f64::from(x) - mean) / std) as f32).collect()
}

/// Standardizes each component of a 28×28 flow into the `[1, 1, 28, 28]`
/// horizontal and vertical network inputs.
pub fn normalize_flow(field: &FlowField) -> Result<(Tensor<f32>, Tensor<f32>)> {
    if (field.height(), field.width()) != (NET_INPUT_SIZE, NET_INPUT_SIZE) {
        return Err(Error::Data(format!(
            "network input flow must be {NET_INPUT_SIZE}x{NET_INPUT_SIZE}, got {}x{}",
            field.height(),
            field.width()
        )));
    }
    let shape = [1, 1, NET_INPUT_SIZE, NET_INPUT_SIZE];
    Ok((
        Tensor::new(shape, standardize(field.u()))?,
        Tensor::new(shape, standardize(field.v()))?,
    ))
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    #[test]
    fn constant_stays_constant() {
        let f = FlowField::new(5, 7, vec![1.5; 35], vec![-2.0; 35]).unwrap();
        let r = resize_bilinear(&f, 28, 28).unwrap();
        assert_eq!((r.height(), r.width()), (28, 28));
        assert!(r.u().iter().all(|&x| (x - 1.5).abs() < 1e-6));
        assert!(r.v().iter().all(|&x| (x + 2.0).abs() < 1e-6));
    }

    #[test]
    fn same_size_is_identity() {
        let px: Vec<f32> = (0..30).map(|i| (i as f32 * 0.61).sin().abs()).collect();
        let g = GrayFrame::new(5, 6, px.clone()).unwrap();
        let r = resize_bilinear(&g, 5, 6).unwrap();
        for (a, b) in r.pixels().iter().zip(&px) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn two_by_two_to_two_by_three() {
        let f = FlowField::new(2, 2, vec![0.0, 1.0, 0.0, 1.0], vec![0.0; 4]).unwrap();
        let r = resize_bilinear(&f, 2, 3).unwrap();
        assert_eq!(r.u(), &[0.0, 0.5, 1.0, 0.0, 0.5, 1.0]);
    }

    #[test]
    fn degenerate_source_rejected() {
        let f = FlowField::new(1, 4, vec![0.0; 4], vec![0.0; 4]).unwrap();
        assert!(matches!(resize_bilinear(&f, 28, 28), Err(Error::Data(_))));
    }

    #[test]
    fn constant_component_normalizes_to_zero() {
        let f = FlowField::new(28, 28, vec![3.0; 784], vec![0.0; 784]).unwrap();
        let (u, v) = normalize_flow(&f).unwrap();
        assert_eq!(u.shape(), &[1, 1, 28, 28]);
        assert!(u.data().iter().chain(v.data()).all(|&x| x == 0.0));
    }

    #[test]
    fn alternating_component_becomes_plus_minus_one() {
        let alt: Vec<f32> = (0..784).map(|i| if i % 2 == 0 { -1.0 } else { 1.0 }).collect();
        let scaled: Vec<f32> = alt.iter().map(|x| x * 0.25 + 3.0).collect();
        let f = FlowField::new(28, 28, alt.clone(), scaled).unwrap();
        let (u, v) = normalize_flow(&f).unwrap();
        for ((a, b), want) in u.data().iter().zip(v.data()).zip(&alt) {
            assert!((a - want).abs() < 1e-6);
            assert!((b - want).abs() < 1e-6);
        }
    }

    #[test]
    fn wrong_size_rejected() {
        assert!(normalize_flow(&FlowField::zeros(27, 28)).is_err());
    }

    proptest! {
        #[test]
        fn normalized_components_are_standard(values in prop::collection::vec(-5.0f32..5.0, 784)) {
            let f = FlowField::new(28, 28, values.clone(), values.iter().map(|x| x * x).collect()).unwrap();
            let (u, v) = normalize_flow(&f).unwrap();
            for t in [u, v] {
                let d: Vec<f64> = t.data().iter().map(|&x| f64::from(x)).collect();
                let mean = d.iter().sum::<f64>() / 784.0;
                let var = d.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / 784.0;
                prop_assert!(mean.abs() < 1e-6, "mean {}", mean);
                prop_assert!((var - 1.0).abs() < 1e-4, "var {}", var);
            }
        }
    }
}
