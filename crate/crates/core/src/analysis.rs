//! Grad-CAM heatmaps on the backbone's final feature map and their export
//! as binary PGM images.

use std::fs;
use std::path::Path;

use crate::autograd::Graph;
use crate::data::Lesion;
use crate::error::{Error, FormatError, Result};
use crate::model::Model;
use crate::tensor::Tensor;

/// An `h×w` grid of values in `[0, 1]`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Heatmap {
    pub h: usize,
    pub w: usize,
    pub values: Vec<f32>,
}

impl Heatmap {
    pub fn new(h: usize, w: usize, values: Vec<f32>) -> Result<Self> {
        if h == 0 || w == 0 || values.len() != h * w {
            return Err(Error::Dimension(format!(
                "heatmap {h}×{w} needs {} values, got {}",
                h * w,
                values.len()
            )));
        }
        Ok(Heatmap { h, w, values })
    }

    pub fn get(&self, r: usize, c: usize) -> f32 {
        self.values[r * self.w + c]
    }

    /// Cell of the largest value; ties go to the first cell in row-major
    /// order.
    pub fn argmax(&self) -> (usize, usize) {
        let mut best = 0;
        for (i, &v) in self.values.iter().enumerate() {
            if v > self.values[best] {
                best = i;
            }
        }
        (best / self.w, best % self.w)
    }

    /// Min-max normalization to `[0, 1]`. An all-zero map is left as is and
    /// a constant positive map becomes all ones.
    pub fn normalize(&mut self) {
        let max = self.values.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let min = self.values.iter().copied().fold(f32::INFINITY, f32::min);
        if max <= 0.0 && min >= 0.0 {
            return;
        }
        if max > min {
            self.values.iter_mut().for_each(|v| *v = (*v - min) / (max - min));
        } else {
            self.values.iter_mut().for_each(|v| *v = 1.0);
        }
    }

    /// Bilinear resampling with pixel centers aligned, for rendering at
    /// image resolution.
    pub fn upsample_bilinear(&self, out_h: usize, out_w: usize) -> Result<Heatmap> {
        if out_h == 0 || out_w == 0 {
            return Err(Error::Dimension("upsampled heatmap must be non-empty".into()));
        }
        let coord = |i: usize, out: usize, inp: usize| -> (usize, usize, f32) {
            let x = ((i as f32 + 0.5) * inp as f32 / out as f32 - 0.5).clamp(0.0, (inp - 1) as f32);
            let lo = x.floor() as usize;
            (lo, (lo + 1).min(inp - 1), x - lo as f32)
        };
        let mut values = Vec::with_capacity(out_h * out_w);
        for r in 0..out_h {
            let (r0, r1, fr) = coord(r, out_h, self.h);
            for c in 0..out_w {
                let (c0, c1, fc) = coord(c, out_w, self.w);
                let top = self.get(r0, c0) * (1.0 - fc) + self.get(r0, c1) * fc;
                let bottom = self.get(r1, c0) * (1.0 - fc) + self.get(r1, c1) * fc;
                values.push(top * (1.0 - fr) + bottom * fr);
            }
        }
        Heatmap::new(out_h, out_w, values)
    }
}

/// Grad-CAM for `target`: the gradient of the target's fused logit with
/// respect to the final feature map gives one weight per channel (its
/// spatial mean); the map is the rectified weighted channel sum, min-max
/// normalized.
pub fn grad_cam(model: &Model, image: &Tensor, target: usize) -> Result<Heatmap> {
    let classes = model.classes();
    if target >= classes {
        return Err(Error::Index {
            index: target,
            len: classes,
        });
    }
    let mut g = Graph::new();
    let fwd = model.forward(&mut g, image, false, 0)?;
    let logit = g.select(fwd.outputs.fused_logits, target)?;
    g.backward(logit)?;
    let grid = fwd.features;
    let acts = g.value(grid.var);
    let n = grid.h * grid.w;
    let d = acts.len() / n;
    let grads = g.grad(grid.var).map(<[f32]>::to_vec).unwrap_or_else(|| vec![0.0; acts.len()]);
    let mut weights = vec![0.0f32; d];
    for row in grads.chunks_exact(d) {
        weights.iter_mut().zip(row).for_each(|(w, &v)| *w += v / n as f32);
    }
    let values = acts
        .chunks_exact(d)
        .map(|a| a.iter().zip(&weights).map(|(&x, &w)| x * w).sum::<f32>().max(0.0))
        .collect();
    let mut hm = Heatmap::new(grid.h, grid.w, values)?;
    hm.normalize();
    Ok(hm)
}

/// Whether the heatmap peak lies within one cell of the cell containing the
/// lesion center, for an image of `side` pixels.
pub fn peak_near_lesion(hm: &Heatmap, lesion: &Lesion, side: usize) -> bool {
    let cell = |x: f32, n: usize| ((x * n as f32 / side as f32).floor().max(0.0) as usize).min(n - 1);
    let (lr, lc) = (cell(lesion.row, hm.h), cell(lesion.col, hm.w));
    let (pr, pc) = hm.argmax();
    pr.abs_diff(lr) <= 1 && pc.abs_diff(lc) <= 1
}

/// Binary PGM bytes: `P5\n<w> <h>\n255\n` then `round(v·255)` per cell.
pub fn heatmap_pgm_bytes(hm: &Heatmap) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", hm.w, hm.h).into_bytes();
    out.extend(hm.values.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    out
}

pub fn export_heatmap_pgm(hm: &Heatmap, path: &Path) -> Result<()> {
    fs::write(path, heatmap_pgm_bytes(hm)).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

/// Parses the PGM layout written by [`heatmap_pgm_bytes`].
pub fn parse_pgm(bytes: &[u8]) -> std::result::Result<Heatmap, FormatError> {
    let bad = |what: &str| FormatError::Malformed(what.to_string());
    let mut fields = Vec::with_capacity(4);
    let mut at = 0;
    while fields.len() < 4 {
        while at < bytes.len() && bytes[at].is_ascii_whitespace() {
            at += 1;
        }
        let start = at;
        while at < bytes.len() && !bytes[at].is_ascii_whitespace() {
            at += 1;
        }
        if start == at {
            return Err(FormatError::TruncatedHeader);
        }
        fields.push(std::str::from_utf8(&bytes[start..at]).map_err(|_| bad("non-ascii header"))?);
    }
    if fields[0] != "P5" {
        let mut magic = [0u8; 4];
        magic.iter_mut().zip(fields[0].bytes()).for_each(|(m, b)| *m = b);
        return Err(FormatError::BadMagic(magic));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| bad("non-numeric header field"));
    let (w, h, maxval) = (num(fields[1])?, num(fields[2])?, num(fields[3])?);
    if maxval != 255 {
        return Err(bad("only 8-bit PGM is supported"));
    }
    if w == 0 || h == 0 {
        return Err(FormatError::ZeroDim(vec![h, w]));
    }
    // exactly one whitespace byte separates the header from the payload
    let payload = bytes.get(at + 1..).unwrap_or(&[]);
    match payload.len().cmp(&(w * h)) {
        std::cmp::Ordering::Less => Err(FormatError::TruncatedPayload {
            expected: w * h,
            found: payload.len(),
        }),
        std::cmp::Ordering::Greater => Err(FormatError::TrailingBytes(payload.len() - w * h)),
        std::cmp::Ordering::Equal => Ok(Heatmap {
            h,
            w,
            values: payload.iter().map(|&b| b as f32 / 255.0).collect(),
        }),
    }
}

pub fn load_pgm(path: &Path) -> Result<Heatmap> {
    let bytes = fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    parse_pgm(&bytes).map_err(|kind| Error::Format {
        path: path.to_path_buf(),
        kind,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::BackboneConfig;
    use crate::head::{BranchConfig, HeadConfig};
    use crate::nn::Parameterized;

    #[test]
    fn pgm_examples() {
        let one = Heatmap::new(1, 1, vec![1.0]).unwrap();
        let bytes = heatmap_pgm_bytes(&one);
        assert_eq!(bytes, b"P5\n1 1\n255\n\xff");
        let zero = Heatmap::new(2, 3, vec![0.0; 6]).unwrap();
        assert!(heatmap_pgm_bytes(&zero)[11..].iter().all(|&b| b == 0));
        assert_eq!(&heatmap_pgm_bytes(&zero)[..11], b"P5\n3 2\n255\n");
    }

    #[test]
    fn pgm_round_trip_is_within_quantization() {
        let vals: Vec<f32> = (0..12).map(|i| (i as f32 * 0.37).fract()).collect();
        let hm = Heatmap::new(3, 4, vals).unwrap();
        let back = parse_pgm(&heatmap_pgm_bytes(&hm)).unwrap();
        assert_eq!((back.h, back.w), (3, 4));
        for (a, b) in hm.values.iter().zip(&back.values) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-6);
        }
        let mut bytes = heatmap_pgm_bytes(&hm);
        bytes.pop();
        assert!(matches!(parse_pgm(&bytes), Err(FormatError::TruncatedPayload { .. })));
        assert!(matches!(parse_pgm(b"P6\n1 1\n255\n\x00"), Err(FormatError::BadMagic(_))));
    }

    #[test]
    fn normalization_rules() {
        let mut z = Heatmap::new(1, 3, vec![0.0; 3]).unwrap();
        z.normalize();
        assert_eq!(z.values, vec![0.0; 3]);
        let mut c = Heatmap::new(1, 2, vec![0.4, 0.4]).unwrap();
        c.normalize();
        assert_eq!(c.values, vec![1.0, 1.0]);
        let mut m = Heatmap::new(1, 3, vec![0.2, 0.6, 1.0]).unwrap();
        m.normalize();
        for (a, b) in m.values.iter().zip([0.0, 0.5, 1.0]) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn upsampling_keeps_constants_and_range() {
        let hm = Heatmap::new(2, 2, vec![0.0, 1.0, 1.0, 0.5]).unwrap();
        let up = hm.upsample_bilinear(8, 8).unwrap();
        assert_eq!(up.values.len(), 64);
        assert!(up.values.iter().all(|v| (0.0..=1.0).contains(v)));
        let flat = Heatmap::new(2, 2, vec![0.3; 4]).unwrap().upsample_bilinear(5, 3).unwrap();
        assert!(flat.values.iter().all(|&v| (v - 0.3).abs() < 1e-6));
    }

    fn tiny_model() -> Model {
        let mut bc = BackboneConfig::with_side(128, 4);
        bc.window = 2;
        let hc = HeadConfig::new(BranchConfig::new(1, 4, 2), BranchConfig::new(2, 2, 2), 3);
        Model::init(bc, hc, 1).unwrap()
    }

    #[test]
    fn cam_has_grid_shape_and_unit_range() {
        let model = tiny_model();
        let img = Tensor::full(&[128, 128, 3], 0.3);
        let hm = grad_cam(&model, &img, 2).unwrap();
        assert_eq!((hm.h, hm.w), (4, 4));
        assert!(hm.values.iter().all(|v| (0.0..=1.0).contains(v)));
        assert!(grad_cam(&model, &img, 3).is_err());
    }

    #[test]
    fn zero_gradients_give_zero_map() {
        let mut model = tiny_model();
        for p in model.params_mut() {
            p.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let img = Tensor::full(&[128, 128, 3], 0.7);
        let hm = grad_cam(&model, &img, 0).unwrap();
        assert!(hm.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn lesion_neighbourhood_check() {
        let mut hm = Heatmap::new(4, 4, vec![0.0; 16]).unwrap();
        hm.values[5] = 1.0;
        let near = Lesion { row: 70.0, col: 70.0, radius: 5.0 };
        let far = Lesion { row: 120.0, col: 120.0, radius: 5.0 };
        assert!(peak_near_lesion(&hm, &near, 128));
        assert!(!peak_near_lesion(&hm, &far, 128));
    }
}
