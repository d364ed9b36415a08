//! Gradient-weighted class activation maps over the extractor's feature
//! block.
//!
//! Channel weights are the spatial means of the class-score gradient at the
//! last convolutional stage; the map is the rectified, weighted channel sum,
//! normalized to [0, 1]. Constant maps carry no localization signal and are
//! flagged degenerate (rendered as zeros) rather than divided by zero.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::CoreError;
use crate::model::{class_index, DeployedModel};
use crate::tensor::Tensor;

/// A class activation map at feature-block resolution plus its image-sized
/// bilinear upsampling.
#[derive(Debug, Clone)]
pub struct Heatmap {
    /// `[fh, fw]`, in [0, 1]; all zeros when degenerate.
    pub grid: Tensor,
    /// `[h, w]` at image resolution, in [0, 1].
    pub upsampled: Tensor,
    /// True when the rectified map was constant and carries no signal.
    pub degenerate: bool,
}

/// Class activation map of `image` for the score of `class_label` ∈ {-1,+1}.
pub fn grad_cam(
    model: &DeployedModel,
    image: &Tensor,
    class_label: i8,
) -> Result<Heatmap, CoreError> {
    if class_label != 1 && class_label != -1 {
        return Err(CoreError::InvalidLabel { value: class_label });
    }
    let mut batch_shape = vec![1];
    batch_shape.extend_from_slice(image.shape());
    let batch = image.clone().reshape(&batch_shape);

    let features = model.extract_features(&batch)?;
    let fshape = features.shape().to_vec(); // [1, c, fh, fw]
    let (c, fh, fw) = (fshape[1], fshape[2], fshape[3]);

    // Gradient of the selected class score w.r.t. the feature block.
    let (scores, trace_f) = model.head().forward(model.params_f(), &features);
    let mut dscores = Tensor::zeros(scores.shape());
    dscores.data_mut()[class_index(class_label)] = 1.0;
    let mut head_scratch = vec![0.0; model.params_f().len()];
    let dfeatures = model.head().backward(model.params_f(), &trace_f, &dscores, &mut head_scratch);

    // Spatially averaged gradients weight the activation channels.
    let hw = fh * fw;
    let mut cam = vec![0.0; hw];
    for ch in 0..c {
        let grad_plane = &dfeatures.data()[ch * hw..(ch + 1) * hw];
        let weight = grad_plane.iter().sum::<f64>() / hw as f64;
        let act_plane = &features.data()[ch * hw..(ch + 1) * hw];
        for (acc, &a) in cam.iter_mut().zip(act_plane.iter()) {
            *acc += weight * a;
        }
    }
    for v in &mut cam {
        *v = v.max(0.0);
    }

    let lo = cam.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = cam.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let degenerate = !(hi - lo).is_normal();
    let grid = if degenerate {
        Tensor::zeros(&[fh, fw])
    } else {
        Tensor::from_vec(&[fh, fw], cam.iter().map(|&v| (v - lo) / (hi - lo)).collect())
    };

    let (h, w) = (image.shape()[1], image.shape()[2]);
    let upsampled = bilinear_upsample(&grid, h, w);
    Ok(Heatmap { grid, upsampled, degenerate })
}

/// Bilinear resize of a `[h,w]` map, pixel centers aligned.
pub fn bilinear_upsample(map: &Tensor, out_h: usize, out_w: usize) -> Tensor {
    let (h, w) = (map.shape()[0], map.shape()[1]);
    let mut out = vec![0.0; out_h * out_w];
    let sy = h as f64 / out_h as f64;
    let sx = w as f64 / out_w as f64;
    for oy in 0..out_h {
        let fy = ((oy as f64 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f64);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let ty = fy - y0 as f64;
        for ox in 0..out_w {
            let fx = ((ox as f64 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f64);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let tx = fx - x0 as f64;
            let a = map.data()[y0 * w + x0];
            let b = map.data()[y0 * w + x1];
            let c = map.data()[y1 * w + x0];
            let d = map.data()[y1 * w + x1];
            out[oy * out_w + ox] =
                a * (1.0 - ty) * (1.0 - tx) + b * (1.0 - ty) * tx + c * ty * (1.0 - tx) + d * ty * tx;
        }
    }
    Tensor::from_vec(&[out_h, out_w], out)
}

/// Fraction of total heatmap mass inside a half-open (r0, c0, r1, c1) box.
pub fn mass_fraction_in_box(map: &Tensor, bounds: (usize, usize, usize, usize)) -> f64 {
    let (h, w) = (map.shape()[0], map.shape()[1]);
    let (r0, c0, r1, c1) = bounds;
    let total: f64 = map.data().iter().sum();
    if total <= 0.0 {
        return 0.0;
    }
    let mut inside = 0.0;
    for r in r0..r1.min(h) {
        for c in c0..c1.min(w) {
            inside += map.data()[r * w + c];
        }
    }
    inside / total
}
