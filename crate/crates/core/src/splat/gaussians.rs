use crate::error::{Error, Result};

/// Values per gaussian in the flat differentiable layout.
pub const PARAMS_PER_GAUSSIAN: usize = 14;

/// Parameter classes and their offsets in the flat layout.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ParamClass {
    Position,
    Scale,
    Rotation,
    Opacity,
    Color,
}

impl ParamClass {
    pub const ALL: [ParamClass; 5] =
        [ParamClass::Position, ParamClass::Scale, ParamClass::Rotation, ParamClass::Opacity, ParamClass::Color];

    pub fn range(self) -> std::ops::Range<usize> {
        match self {
            ParamClass::Position => 0..3,
            ParamClass::Scale => 3..6,
            ParamClass::Rotation => 6..10,
            ParamClass::Opacity => 10..11,
            ParamClass::Color => 11..14,
        }
    }

    pub fn of_offset(offset: usize) -> ParamClass {
        match offset % PARAMS_PER_GAUSSIAN {
            0..=2 => ParamClass::Position,
            3..=5 => ParamClass::Scale,
            6..=9 => ParamClass::Rotation,
            10 => ParamClass::Opacity,
            _ => ParamClass::Color,
        }
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[inline]
pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// One gaussian in activated form.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Gaussian {
    pub position: [f64; 3],
    pub scale: [f64; 3],
    /// `(w, x, y, z)`; normalized on insertion.
    pub rotation: [f64; 4],
    pub opacity: f64,
    pub color: [f64; 3],
}

/// Trainable gaussian scene. Parameters are stored pre-activation in `f32`:
/// log-scales, opacity logits and color logits.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GaussianSet {
    pub positions: Vec<[f32; 3]>,
    pub log_scales: Vec<[f32; 3]>,
    pub rotations: Vec<[f32; 4]>,
    pub opacity_logits: Vec<f32>,
    pub color_logits: Vec<[f32; 3]>,
}

impl GaussianSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn push(&mut self, g: Gaussian) {
        let q = normalize4(g.rotation);
        let clamp01 = |v: f64| v.clamp(1e-6, 1.0 - 1e-6);
        self.positions.push(g.position.map(|v| v as f32));
        self.log_scales.push(g.scale.map(|s| s.ln() as f32));
        self.rotations.push(q.map(|v| v as f32));
        self.opacity_logits.push(logit(clamp01(g.opacity)) as f32);
        self.color_logits.push(g.color.map(|c| logit(clamp01(c)) as f32));
    }

    pub fn get(&self, i: usize) -> Gaussian {
        Gaussian {
            position: self.positions[i].map(f64::from),
            scale: self.log_scales[i].map(|v| f64::from(v).exp()),
            rotation: self.rotations[i].map(f64::from),
            opacity: sigmoid(f64::from(self.opacity_logits[i])),
            color: self.color_logits[i].map(|v| sigmoid(f64::from(v))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.len();
        if self.log_scales.len() != n
            || self.rotations.len() != n
            || self.opacity_logits.len() != n
            || self.color_logits.len() != n
        {
            return Err(Error::Validation("gaussian parameter arrays differ in length".into()));
        }
        for i in 0..n {
            let finite = self.positions[i].iter().all(|v| v.is_finite())
                && self.log_scales[i].iter().all(|v| v.is_finite())
                && self.rotations[i].iter().all(|v| v.is_finite())
                && self.opacity_logits[i].is_finite()
                && self.color_logits[i].iter().all(|v| v.is_finite());
            if !finite {
                return Err(Error::Validation(format!("gaussian {i} has a non-finite parameter")));
            }
            let qn: f32 = self.rotations[i].iter().map(|v| v * v).sum();
            if qn == 0.0 {
                return Err(Error::Validation(format!("gaussian {i} has a zero quaternion")));
            }
        }
        Ok(())
    }

    pub fn renormalize_rotations(&mut self) {
        for q in &mut self.rotations {
            *q = normalize4(q.map(f64::from)).map(|v| v as f32);
        }
    }

    /// Flat `f64` parameter vector in [`PARAMS_PER_GAUSSIAN`] layout.
    pub fn to_params(&self) -> SplatParams {
        let mut values = Vec::with_capacity(self.len() * PARAMS_PER_GAUSSIAN);
        for i in 0..self.len() {
            values.extend(self.positions[i].iter().map(|&v| f64::from(v)));
            values.extend(self.log_scales[i].iter().map(|&v| f64::from(v)));
            values.extend(self.rotations[i].iter().map(|&v| f64::from(v)));
            values.push(f64::from(self.opacity_logits[i]));
            values.extend(self.color_logits[i].iter().map(|&v| f64::from(v)));
        }
        SplatParams { values }
    }

    /// Rounds a flat parameter vector back into `f32` storage.
    pub fn from_params(params: &SplatParams) -> Self {
        let mut set = GaussianSet::new();
        for g in params.values.chunks_exact(PARAMS_PER_GAUSSIAN) {
            let f = |r: std::ops::Range<usize>| -> Vec<f32> { g[r].iter().map(|&v| v as f32).collect() };
            set.positions.push(f(0..3).try_into().unwrap());
            set.log_scales.push(f(3..6).try_into().unwrap());
            set.rotations.push(f(6..10).try_into().unwrap());
            set.opacity_logits.push(g[10] as f32);
            set.color_logits.push(f(11..14).try_into().unwrap());
        }
        set
    }
}

/// Flat `f64` view of a gaussian set used by the differentiable renderer.
#[derive(Clone, Debug, PartialEq)]
pub struct SplatParams {
    pub values: Vec<f64>,
}

impl SplatParams {
    pub fn len(&self) -> usize {
        self.values.len() / PARAMS_PER_GAUSSIAN
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    #[inline]
    pub fn gaussian(&self, i: usize) -> &[f64] {
        &self.values[i * PARAMS_PER_GAUSSIAN..(i + 1) * PARAMS_PER_GAUSSIAN]
    }

    pub fn validate(&self) -> Result<()> {
        if self.values.len() % PARAMS_PER_GAUSSIAN != 0 {
            return Err(Error::Validation("parameter vector length is not a multiple of 14".into()));
        }
        if let Some(i) = self.values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Validation(format!(
                "gaussian {} has a non-finite parameter",
                i / PARAMS_PER_GAUSSIAN
            )));
        }
        Ok(())
    }
}

pub(crate) fn normalize4(q: [f64; 4]) -> [f64; 4] {
    let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
    if n == 0.0 {
        [1.0, 0.0, 0.0, 0.0]
    } else {
        q.map(|v| v / n)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn push_then_get_recovers_activated_values() {
        let mut set = GaussianSet::new();
        set.push(Gaussian {
            position: [0.5, -1.0, 2.0],
            scale: [0.1, 0.2, 0.3],
            rotation: [2.0, 0.0, 0.0, 0.0],
            opacity: 0.7,
            color: [0.2, 0.5, 0.9],
        });
        let g = set.get(0);
        assert_eq!(g.rotation, [1.0, 0.0, 0.0, 0.0]);
        assert!((g.opacity - 0.7).abs() < 1e-6);
        assert!((g.scale[2] - 0.3).abs() < 1e-6);
        assert!((g.color[0] - 0.2).abs() < 1e-6);
    }

    #[test]
    fn flat_params_round_trip_through_f32_storage() {
        let mut set = GaussianSet::new();
        for i in 0..3 {
            set.push(Gaussian {
                position: [i as f64, 0.1, 0.2],
                scale: [0.05; 3],
                rotation: [1.0, 0.1 * i as f64, 0.0, 0.3],
                opacity: 0.5,
                color: [0.3; 3],
            });
        }
        assert_eq!(GaussianSet::from_params(&set.to_params()), set);
    }

    #[test]
    fn non_finite_values_fail_validation() {
        let mut set = GaussianSet::new();
        set.push(Gaussian { position: [0.0; 3], scale: [1.0; 3], rotation: [1.0, 0.0, 0.0, 0.0], opacity: 0.5, color: [0.5; 3] });
        set.positions[0][1] = f32::NAN;
        assert!(set.validate().is_err());
        assert!(set.to_params().validate().is_err());
    }
}
