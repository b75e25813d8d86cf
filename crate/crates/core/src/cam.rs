//! Post-hoc class activation maps: CAM, GradCAM, GradCAM++ and LayerCAM.
//!
//! Gradient-based methods differentiate the class logit with respect to a
//! stage's output. The stage output is re-recorded as a fresh leaf and only
//! the network tail runs on the graph, so parameters never receive
//! gradients and the caller's state is untouched.

use std::fmt;
use std::path::Path;

use crate::au::AuMap;
use crate::error::{Error, Result};
use crate::model::{Head, ModelState};
use crate::tensor::{Graph, Tensor};

/// Guards the GradCAM++ weight denominator.
pub const GRADCAM_PP_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum CamMethod {
    Cam,
    GradCam,
    GradCamPp,
    LayerCam,
}

impl CamMethod {
    pub const ALL: [CamMethod; 4] = [CamMethod::Cam, CamMethod::GradCam, CamMethod::GradCamPp, CamMethod::LayerCam];

    pub fn as_str(self) -> &'static str {
        match self {
            CamMethod::Cam => "cam",
            CamMethod::GradCam => "gradcam",
            CamMethod::GradCamPp => "gradcampp",
            CamMethod::LayerCam => "layercam",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "cam" => Ok(CamMethod::Cam),
            "gradcam" => Ok(CamMethod::GradCam),
            "gradcampp" | "gradcam++" => Ok(CamMethod::GradCamPp),
            "layercam" => Ok(CamMethod::LayerCam),
            other => Err(Error::Config(format!("unknown CAM method {other:?}"))),
        }
    }
}

impl fmt::Display for CamMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Max-normalized nonnegative map for one class at one stage.
#[derive(Debug, Clone, PartialEq)]
pub struct CamMap {
    pub h: usize,
    pub w: usize,
    pub values: Vec<f64>,
    pub method: CamMethod,
    pub class_index: usize,
    pub layer: usize,
}

impl CamMap {
    fn from_raw(raw: Vec<f64>, h: usize, w: usize, method: CamMethod, class_index: usize, layer: usize) -> Self {
        Self {
            h,
            w,
            values: relu_max_normalize(raw),
            method,
            class_index,
            layer,
        }
    }

    pub fn is_zero(&self) -> bool {
        self.values.iter().all(|&v| v == 0.0)
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(vec![self.h, self.w], self.values.clone()).expect("sized")
    }

    pub fn to_map(&self) -> AuMap {
        AuMap::from_values(self.h, self.w, self.values.clone()).expect("normalized values")
    }

    pub fn save(&self, pgm_path: &Path, raw_path: &Path) -> Result<()> {
        self.to_map().save(pgm_path, raw_path)
    }
}

/// ReLU then divide by the maximum; an all-nonpositive input becomes zeros.
pub fn relu_max_normalize(mut v: Vec<f64>) -> Vec<f64> {
    v.iter_mut().for_each(|x| *x = x.max(0.0));
    let max = v.iter().copied().fold(0.0, f64::max);
    if max > 0.0 {
        v.iter_mut().for_each(|x| *x /= max);
    }
    v
}

fn shape3(t: &Tensor, op: &'static str) -> Result<(usize, usize, usize)> {
    match *t.shape() {
        [n, h, w] => Ok((n, h, w)),
        _ => Err(Error::dim(op, "rank", 3, format!("{:?}", t.shape()))),
    }
}

fn weighted_channel_sum(features: &Tensor, weights: &[f64]) -> Vec<f64> {
    let (_, h, w) = (features.shape()[0], features.shape()[1], features.shape()[2]);
    let plane = h * w;
    let mut out = vec![0.0; plane];
    for (ch, &wk) in features.data().chunks_exact(plane).zip(weights) {
        if wk != 0.0 {
            out.iter_mut().zip(ch).for_each(|(o, f)| *o += wk * f);
        }
    }
    out
}

/// Vanilla CAM from last-stage features and `[classes, n]` head weights.
pub fn cam(features: &Tensor, head_weights: &Tensor, y: usize, layer: usize) -> Result<CamMap> {
    let (n, h, w) = shape3(features, "cam")?;
    if head_weights.ndim() != 2 || head_weights.shape()[1] != n {
        return Err(Error::dim(
            "cam",
            "head weight columns",
            n,
            format!("{:?}", head_weights.shape()),
        ));
    }
    let classes = head_weights.shape()[0];
    if y >= classes {
        return Err(Error::Index {
            op: "cam",
            index: y,
            len: classes,
        });
    }
    let row = &head_weights.data()[y * n..(y + 1) * n];
    Ok(CamMap::from_raw(weighted_channel_sum(features, row), h, w, CamMethod::Cam, y, layer))
}

/// Builds a gradient-based map from features and `d logit_y / d features`.
pub fn cam_from_gradients(
    method: CamMethod,
    features: &Tensor,
    grads: &Tensor,
    y: usize,
    layer: usize,
) -> Result<CamMap> {
    let (n, h, w) = shape3(features, "cam_from_gradients")?;
    if grads.shape() != features.shape() {
        return Err(Error::dim(
            "cam_from_gradients",
            "gradient shape",
            format!("{:?}", features.shape()),
            format!("{:?}", grads.shape()),
        ));
    }
    let plane = h * w;
    let fch = features.data().chunks_exact(plane);
    let gch = grads.data().chunks_exact(plane);
    let raw = match method {
        CamMethod::Cam => {
            return Err(Error::Parameter("CAM uses head weights, not gradients".into()));
        }
        CamMethod::GradCam => {
            let alpha: Vec<f64> = gch.map(|g| g.iter().sum::<f64>() / plane as f64).collect();
            weighted_channel_sum(features, &alpha)
        }
        CamMethod::GradCamPp => {
            let weights: Vec<f64> = fch
                .zip(gch)
                .map(|(f, g)| {
                    let s: f64 = f.iter().zip(g).map(|(a, gv)| a * gv * gv * gv).sum();
                    g.iter()
                        .map(|&gv| {
                            let g2 = gv * gv;
                            let denom = 2.0 * g2 + s * g2 * gv;
                            if gv == 0.0 || denom.abs() < GRADCAM_PP_EPS {
                                0.0
                            } else {
                                g2 / denom * gv.max(0.0)
                            }
                        })
                        .sum()
                })
                .collect();
            weighted_channel_sum(features, &weights)
        }
        CamMethod::LayerCam => {
            let mut out = vec![0.0; plane];
            for (f, g) in fch.zip(gch) {
                for ((o, a), gv) in out.iter_mut().zip(f).zip(g) {
                    *o += gv.max(0.0) * a;
                }
            }
            out
        }
    };
    debug_assert_eq!(n, features.shape()[0]);
    Ok(CamMap::from_raw(raw, h, w, method, y, layer))
}

/// Stage-`l` output and the gradient of `logit_y` with respect to it.
pub fn layer_gradients(state: &ModelState, image: &Tensor, y: usize, l: usize) -> Result<(Tensor, Tensor)> {
    let stages = state.stage_count();
    if l == 0 || l > stages {
        return Err(Error::Parameter(format!("layer {l} outside 1..={stages}")));
    }
    let classes = state.config().classes;
    if y >= classes {
        return Err(Error::Index {
            op: "layer_gradients",
            index: y,
            len: classes,
        });
    }
    let mut g = Graph::new();
    let params = state.param_vars(&mut g, false);
    let x = g.constant(image.clone());
    let x = state.center_input(&mut g, x);
    let head_stages = state.run_stages(&mut g, &params, x, 0, l)?;
    let features = g.value(head_stages[l - 1].1).clone();
    let leaf = g.leaf(features.clone().with_requires_grad(true));
    let tail = state.run_stages(&mut g, &params, leaf, l, stages)?;
    let last = tail.last().map_or(leaf, |s| s.1);
    let logits = state.run_head(&mut g, &params, last)?;
    let score = g.select(logits, y)?;
    g.backward(score)?;
    let grads = g.grad(leaf).map_or_else(|| vec![0.0; features.numel()], <[f64]>::to_vec);
    let grads = Tensor::new(features.shape().to_vec(), grads)?;
    Ok((features, grads))
}

/// Runs one extractor on a model for class `y` at stage `l`.
pub fn extract(state: &ModelState, image: &Tensor, y: usize, l: usize, method: CamMethod) -> Result<CamMap> {
    match method {
        CamMethod::Cam => {
            if state.config().head != Head::GapLinear {
                return Err(Error::UnsupportedHead {
                    method: method.as_str().into(),
                });
            }
            if l != state.stage_count() {
                return Err(Error::Parameter(format!(
                    "CAM is defined on the last stage ({}), not layer {l}",
                    state.stage_count()
                )));
            }
            let pass = state.forward(image)?;
            cam(&pass.features[l - 1], state.head_weights(), y, l)
        }
        _ => {
            let (features, grads) = layer_gradients(state, image, y, l)?;
            cam_from_gradients(method, &features, &grads, y, l)
        }
    }
}

pub fn gradcam(state: &ModelState, image: &Tensor, y: usize, l: usize) -> Result<CamMap> {
    extract(state, image, y, l, CamMethod::GradCam)
}

pub fn gradcam_pp(state: &ModelState, image: &Tensor, y: usize, l: usize) -> Result<CamMap> {
    extract(state, image, y, l, CamMethod::GradCamPp)
}

pub fn layercam(state: &ModelState, image: &Tensor, y: usize, l: usize) -> Result<CamMap> {
    extract(state, image, y, l, CamMethod::LayerCam)
}
