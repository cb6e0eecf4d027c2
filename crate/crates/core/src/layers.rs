//! Two-layer scene model: per-layer image and flow fields on fronto-parallel
//! planes, an alpha field on the obstruction plane, and compositing.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::camera::{
    generate_rays_op, plane_to_field_op, pose_control_points, project_plane_op, CameraError, Intrinsics, Plane,
    PoseModel, PoseVars, RayBatch,
};
use crate::data::Image;
use crate::diffcore::{DiffError, Tape, Tensor, Var};
use crate::encoding::{coarse_mask, hash_encode_op, EncodingError, EncodingSize, HashGrid};
use crate::mlp::{mlp_forward, MlpError, MlpVars, MlpWeights};
use crate::real::Real;
use crate::spline::{spline_eval_op, SplineMode};

#[derive(Debug, Error)]
pub enum LayerError {
    #[error("invalid scene configuration: {0}")]
    Config(String),
    #[error("unknown layer '{0}' (expected transmission, obstruction, alpha or composite)")]
    UnknownLayer(String),
    #[error("resolution {0}x{1} must be at least 1x1")]
    Resolution(usize, usize),
    #[error("model has no obstruction layer")]
    NoObstruction,
    #[error(transparent)]
    Encoding(#[from] EncodingError),
    #[error(transparent)]
    Mlp(#[from] MlpError),
    #[error(transparent)]
    Camera(#[from] CameraError),
    #[error(transparent)]
    Diff(#[from] DiffError),
}

/// MLP body shared by every field: `layers` affine maps, `width` hidden units.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpShape {
    pub layers: usize,
    pub width: usize,
}

impl Default for MlpShape {
    fn default() -> Self {
        Self { layers: 5, width: 64 }
    }
}

impl MlpShape {
    pub fn topology(&self, input: usize, output: usize) -> Vec<usize> {
        let mut dims = vec![input];
        dims.extend(std::iter::repeat(self.width).take(self.layers.saturating_sub(1)));
        dims.push(output);
        dims
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerConfig {
    pub image: EncodingSize,
    pub flow: EncodingSize,
    pub flow_points: usize,
    pub depth: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObstructionConfig {
    pub layer: LayerConfig,
    pub alpha: EncodingSize,
}

/// Everything needed to rebuild a [`SceneModel`] with the right shapes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneConfig {
    pub intrinsics: Intrinsics,
    pub transmission: LayerConfig,
    pub obstruction: Option<ObstructionConfig>,
    pub mlp: MlpShape,
    pub tau: f64,
    pub eta_r: f64,
    pub pose_points: usize,
    pub alpha_bias: f64,
    pub device_times: Vec<f64>,
    /// Row-major 3×3 per entry of `device_times`.
    pub device_rotations: Vec<[f64; 9]>,
}

impl SceneConfig {
    pub fn for_frames(frames: usize, intrinsics: Intrinsics, transmission: LayerConfig) -> Self {
        Self {
            intrinsics,
            transmission,
            obstruction: None,
            mlp: MlpShape::default(),
            tau: 1.0,
            eta_r: 0.01,
            pose_points: pose_control_points(frames),
            alpha_bias: -2.0,
            device_times: vec![],
            device_rotations: vec![],
        }
    }

    pub fn validate(&self) -> Result<(), LayerError> {
        self.intrinsics.validate()?;
        if !(self.tau.is_finite() && self.tau > 0.0) {
            return Err(LayerError::Config(format!("temperature {} must be finite and positive", self.tau)));
        }
        let check = |l: &LayerConfig, name: &str| -> Result<(), LayerError> {
            Plane::fronto(l.depth).validate().map_err(|e| LayerError::Config(format!("{name}: {e}")))?;
            if l.flow_points < 2 {
                return Err(LayerError::Config(format!("{name}: flow needs at least 2 control points")));
            }
            Ok(())
        };
        check(&self.transmission, "transmission")?;
        if let Some(ob) = &self.obstruction {
            check(&ob.layer, "obstruction")?;
            if ob.layer.depth == self.transmission.depth {
                return Err(LayerError::Config("layer depths must differ".into()));
            }
        }
        if self.mlp.layers < 1 || self.mlp.width < 1 {
            return Err(LayerError::Config("MLP needs at least one layer and width 1".into()));
        }
        if self.device_times.len() != self.device_rotations.len() {
            return Err(LayerError::Config("device rotation / timestamp count mismatch".into()));
        }
        Ok(())
    }
}

/// Hash encoding followed by an MLP.
#[derive(Clone, Debug)]
pub struct Field<T: Real> {
    pub grid: HashGrid<T>,
    pub mlp: MlpWeights<T>,
}

#[derive(Clone, Debug)]
pub struct FieldVars {
    pub table: Var,
    pub mlp: MlpVars,
}

impl<T: Real> Field<T> {
    pub fn new(size: EncodingSize, shape: MlpShape, outputs: usize, seed: u64) -> Result<Self, LayerError> {
        let grid = HashGrid::new(size.params(), seed)?;
        let mlp = MlpWeights::init(&shape.topology(grid.output_dim(), outputs), seed.wrapping_add(1))?;
        Ok(Self { grid, mlp })
    }

    pub fn levels(&self) -> usize {
        self.grid.params().levels
    }

    pub fn bind<'a>(&'a self, tape: &mut Tape<'a, T>) -> FieldVars {
        FieldVars { table: tape.param(&self.grid.table), mlp: self.mlp.bind(tape) }
    }

    pub fn bind_frozen<'a>(&'a self, tape: &mut Tape<'a, T>) -> FieldVars {
        FieldVars { table: tape.frozen(&self.grid.table), mlp: self.mlp.bind_frozen(tape) }
    }

    /// `[N, outputs]` for coordinates `[N, 2]`.
    pub fn apply<'a>(&self, tape: &mut Tape<'a, T>, vars: &FieldVars, coords: Var, active: usize) -> Result<Var, DiffError> {
        let enc = hash_encode_op(tape, &self.grid, vars.table, coords, active)?;
        mlp_forward(tape, &vars.mlp, enc)
    }

    fn vars_in_order(vars: &FieldVars) -> Vec<Var> {
        let mut out = vec![vars.table];
        out.extend(vars.mlp.layers.iter().flat_map(|&(w, b)| [w, b]));
        out
    }

    fn named<'s>(&'s self, prefix: &str, out: &mut Vec<(String, &'s Tensor<T>)>) {
        out.push((format!("{prefix}.grid"), &self.grid.table));
        for (i, (w, b)) in self.mlp.layers.iter().enumerate() {
            out.push((format!("{prefix}.mlp.{i}.weight"), w));
            out.push((format!("{prefix}.mlp.{i}.bias"), b));
        }
    }

    fn named_mut<'s>(&'s mut self, prefix: &str, out: &mut Vec<(String, &'s mut Tensor<T>)>) {
        out.push((format!("{prefix}.grid"), &mut self.grid.table));
        for (i, (w, b)) in self.mlp.layers.iter_mut().enumerate() {
            out.push((format!("{prefix}.mlp.{i}.weight"), w));
            out.push((format!("{prefix}.mlp.{i}.bias"), b));
        }
    }
}

/// Image field plus flow neural spline field on one plane.
#[derive(Clone, Debug)]
pub struct LayerModel<T: Real> {
    pub image: Field<T>,
    pub flow: Field<T>,
    pub flow_points: usize,
    pub plane: Plane,
}

#[derive(Clone, Debug)]
pub struct LayerVars {
    pub image: FieldVars,
    pub flow: FieldVars,
}

impl<T: Real> LayerModel<T> {
    pub fn new(cfg: &LayerConfig, shape: MlpShape, seed: u64) -> Result<Self, LayerError> {
        Ok(Self {
            image: Field::new(cfg.image, shape, 3, seed)?,
            flow: Field::new(cfg.flow, shape, 2 * cfg.flow_points, seed.wrapping_add(100))?,
            flow_points: cfg.flow_points,
            plane: Plane::fronto(cfg.depth),
        })
    }

    fn bind<'a>(&'a self, tape: &mut Tape<'a, T>, frozen: bool) -> LayerVars {
        if frozen {
            LayerVars { image: self.image.bind_frozen(tape), flow: self.flow.bind_frozen(tape) }
        } else {
            LayerVars { image: self.image.bind(tape), flow: self.flow.bind(tape) }
        }
    }

    /// Flow `[N, 2]` at `times` for field coordinates `[N, 2]`.
    pub fn flow_op<'a>(
        &self,
        tape: &mut Tape<'a, T>,
        vars: &LayerVars,
        coords: Var,
        times: &[T],
        active: usize,
    ) -> Result<Var, DiffError> {
        let points = self.flow.apply(tape, &vars.flow, coords, active)?;
        spline_eval_op(tape, points, times, self.flow_points, 2, SplineMode::CubicHermite)
    }

    /// RGB in `[0, 1]` at field coordinates `[N, 2]`.
    pub fn color_op<'a>(&self, tape: &mut Tape<'a, T>, vars: &LayerVars, coords: Var, active: usize) -> Result<Var, DiffError> {
        let raw = self.image.apply(tape, &vars.image, coords, active)?;
        Ok(tape.sigmoid(raw))
    }
}

/// Active encoding levels per field.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActiveLevels {
    pub transmission_image: usize,
    pub transmission_flow: usize,
    pub obstruction_image: usize,
    pub obstruction_flow: usize,
    pub alpha: usize,
}

/// Full scene: pose, transmission layer, optional obstruction layer with its
/// alpha field.
#[derive(Clone, Debug)]
pub struct SceneModel<T: Real> {
    pub config: SceneConfig,
    pub pose: PoseModel<T>,
    pub transmission: LayerModel<T>,
    pub obstruction: Option<LayerModel<T>>,
    pub alpha: Option<Field<T>>,
}

#[derive(Clone, Debug)]
pub struct SceneVars {
    pub pose: PoseVars,
    pub transmission: LayerVars,
    pub obstruction: Option<LayerVars>,
    pub alpha: Option<FieldVars>,
    /// Same order as [`SceneModel::named_tensors`].
    pub params: Vec<Var>,
}

/// What a parameter tensor is, for optimizer grouping.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    Pose,
    Table,
    Dense,
}

pub fn param_kind(name: &str) -> ParamKind {
    if name.starts_with("pose.") {
        ParamKind::Pose
    } else if name.ends_with(".grid") {
        ParamKind::Table
    } else {
        ParamKind::Dense
    }
}

/// Batched composite outputs.
#[derive(Clone, Copy, Debug)]
pub struct CompositeVars {
    pub color: Var,
    pub transmission: Var,
    pub obstruction: Option<Var>,
    /// `[N, 1]`; `None` for single-layer models.
    pub alpha: Option<Var>,
    pub transmission_coords: Var,
    pub transmission_flow: Var,
    pub obstruction_coords: Option<Var>,
    pub obstruction_flow: Option<Var>,
}

impl<T: Real> SceneModel<T> {
    pub fn new(config: SceneConfig, seed: u64) -> Result<Self, LayerError> {
        config.validate()?;
        let rotations = config
            .device_rotations
            .iter()
            .map(|r| nalgebra::Matrix3::from_row_slice(r))
            .collect();
        let pose = PoseModel::new(config.pose_points, config.eta_r, config.device_times.clone(), rotations)?;
        let transmission = LayerModel::new(&config.transmission, config.mlp, seed)?;
        let (obstruction, alpha) = match &config.obstruction {
            Some(ob) => {
                let layer = LayerModel::new(&ob.layer, config.mlp, seed.wrapping_add(1000))?;
                let mut alpha = Field::new(ob.alpha, config.mlp, 1, seed.wrapping_add(2000))?;
                alpha.mlp.output_bias_mut().data_mut()[0] = T::lit(config.alpha_bias);
                (Some(layer), Some(alpha))
            }
            None => (None, None),
        };
        Ok(Self { config, pose, transmission, obstruction, alpha })
    }

    pub fn intrinsics(&self) -> &Intrinsics {
        &self.config.intrinsics
    }

    pub fn tau(&self) -> f64 {
        self.config.tau
    }

    pub fn is_single_layer(&self) -> bool {
        self.obstruction.is_none()
    }

    /// All levels of every field.
    pub fn full_levels(&self) -> ActiveLevels {
        self.levels_at(1, 1)
    }

    /// Coarse-to-fine levels at `step` of `steps`.
    pub fn levels_at(&self, step: usize, steps: usize) -> ActiveLevels {
        let m = |f: &Field<T>| coarse_mask(step, steps, f.levels());
        ActiveLevels {
            transmission_image: m(&self.transmission.image),
            transmission_flow: m(&self.transmission.flow),
            obstruction_image: self.obstruction.as_ref().map_or(0, |o| m(&o.image)),
            obstruction_flow: self.obstruction.as_ref().map_or(0, |o| m(&o.flow)),
            alpha: self.alpha.as_ref().map_or(0, m),
        }
    }

    /// Named parameter tensors in binding order.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = vec![
            ("pose.translation".to_string(), &self.pose.translation),
            ("pose.rotation".to_string(), &self.pose.rotation),
        ];
        self.transmission.image.named("transmission.image", &mut out);
        self.transmission.flow.named("transmission.flow", &mut out);
        if let Some(ob) = &self.obstruction {
            ob.image.named("obstruction.image", &mut out);
            ob.flow.named("obstruction.flow", &mut out);
        }
        if let Some(a) = &self.alpha {
            a.named("alpha", &mut out);
        }
        out
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut out = vec![
            ("pose.translation".to_string(), &mut self.pose.translation),
            ("pose.rotation".to_string(), &mut self.pose.rotation),
        ];
        self.transmission.image.named_mut("transmission.image", &mut out);
        self.transmission.flow.named_mut("transmission.flow", &mut out);
        if let Some(ob) = &mut self.obstruction {
            ob.image.named_mut("obstruction.image", &mut out);
            ob.flow.named_mut("obstruction.flow", &mut out);
        }
        if let Some(a) = &mut self.alpha {
            a.named_mut("alpha", &mut out);
        }
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.len()).sum()
    }

    fn bind_with<'a>(&'a self, tape: &mut Tape<'a, T>, frozen: bool) -> SceneVars {
        let pose = if frozen { self.pose.bind_frozen(tape) } else { self.pose.bind(tape) };
        let transmission = self.transmission.bind(tape, frozen);
        let obstruction = self.obstruction.as_ref().map(|o| o.bind(tape, frozen));
        let alpha = self.alpha.as_ref().map(|a| if frozen { a.bind_frozen(tape) } else { a.bind(tape) });
        let mut params = vec![pose.translation, pose.rotation];
        for lv in std::iter::once(&transmission).chain(obstruction.as_ref()) {
            params.extend(Field::<T>::vars_in_order(&lv.image));
            params.extend(Field::<T>::vars_in_order(&lv.flow));
        }
        if let Some(a) = &alpha {
            params.extend(Field::<T>::vars_in_order(a));
        }
        SceneVars { pose, transmission, obstruction, alpha, params }
    }

    pub fn bind<'a>(&'a self, tape: &mut Tape<'a, T>) -> SceneVars {
        self.bind_with(tape, false)
    }

    pub fn bind_frozen<'a>(&'a self, tape: &mut Tape<'a, T>) -> SceneVars {
        self.bind_with(tape, true)
    }
}

fn layer_sample<'a, T: Real>(
    tape: &mut Tape<'a, T>,
    layer: &LayerModel<T>,
    vars: &LayerVars,
    coords: Var,
    times: &[T],
    image_levels: usize,
    flow_levels: usize,
) -> Result<(Var, Var, Var), DiffError> {
    let flow = layer.flow_op(tape, vars, coords, times, flow_levels)?;
    let warped = tape.add(coords, flow)?;
    let color = layer.color_op(tape, vars, warped, image_levels)?;
    Ok((color, warped, flow))
}

/// Per-ray compositing for a batch. With `alpha_override` the alpha field is
/// bypassed and every ray uses that constant.
pub fn composite_op<'a, T: Real>(
    tape: &mut Tape<'a, T>,
    scene: &SceneModel<T>,
    vars: &SceneVars,
    rays: &RayBatch<T>,
    active: &ActiveLevels,
    alpha_override: Option<f64>,
) -> Result<CompositeVars, DiffError> {
    let k = scene.intrinsics();
    let ray_vars = generate_rays_op(tape, &scene.pose, vars.pose, rays)?;
    let plane_uv = project_plane_op(tape, &ray_vars, &scene.transmission.plane)?;
    let tr_coords = plane_to_field_op(tape, k, plane_uv)?;
    let (tr_color, tr_warped, tr_flow) = layer_sample(
        tape,
        &scene.transmission,
        &vars.transmission,
        tr_coords,
        &rays.times,
        active.transmission_image,
        active.transmission_flow,
    )?;
    let (ob, ob_vars, alpha, alpha_vars) = match (&scene.obstruction, &vars.obstruction, &scene.alpha, &vars.alpha) {
        (Some(o), Some(ov), Some(a), Some(av)) => (o, ov, a, av),
        _ => {
            return Ok(CompositeVars {
                color: tr_color,
                transmission: tr_color,
                obstruction: None,
                alpha: None,
                transmission_coords: tr_warped,
                transmission_flow: tr_flow,
                obstruction_coords: None,
                obstruction_flow: None,
            })
        }
    };
    let ob_uv = project_plane_op(tape, &ray_vars, &ob.plane)?;
    let ob_coords = plane_to_field_op(tape, k, ob_uv)?;
    let (ob_color, ob_warped, ob_flow) =
        layer_sample(tape, ob, ob_vars, ob_coords, &rays.times, active.obstruction_image, active.obstruction_flow)?;
    let a = match alpha_override {
        Some(v) => tape.constant(Tensor::new(vec![rays.len(), 1], vec![T::lit(v); rays.len()])?),
        None => {
            let logit = alpha.apply(tape, alpha_vars, ob_warped, active.alpha)?;
            let logit = tape.scale(logit, T::lit(scene.tau()));
            tape.sigmoid(logit)
        }
    };
    let diff = tape.sub(ob_color, tr_color)?;
    let diff = tape.mul_col(diff, a)?;
    let color = tape.add(tr_color, diff)?;
    Ok(CompositeVars {
        color,
        transmission: tr_color,
        obstruction: Some(ob_color),
        alpha: Some(a),
        transmission_coords: tr_warped,
        transmission_flow: tr_flow,
        obstruction_coords: Some(ob_warped),
        obstruction_flow: Some(ob_flow),
    })
}

/// Single-ray result with diagnostics.
#[derive(Clone, Debug, PartialEq)]
pub struct RaySample {
    pub color: [f64; 3],
    pub alpha: f64,
    pub transmission_coords: [f64; 2],
    pub transmission_flow: [f64; 2],
    pub obstruction_coords: Option<[f64; 2]>,
    pub obstruction_flow: Option<[f64; 2]>,
}

fn pair<T: Real>(t: &Tensor<T>, r: usize) -> [f64; 2] {
    [t.data()[2 * r].as_f64(), t.data()[2 * r + 1].as_f64()]
}

pub fn composite_ray<T: Real>(
    u: f64,
    v: f64,
    t: f64,
    scene: &SceneModel<T>,
    active: &ActiveLevels,
) -> Result<RaySample, LayerError> {
    let rays = RayBatch::new(&[(u, v, t)], scene.intrinsics(), &scene.pose);
    let mut tape = Tape::new();
    let vars = scene.bind_frozen(&mut tape);
    let out = composite_op(&mut tape, scene, &vars, &rays, active, None)?;
    let c = tape.value(out.color).data();
    Ok(RaySample {
        color: [c[0].as_f64(), c[1].as_f64(), c[2].as_f64()],
        alpha: out.alpha.map_or(0.0, |a| tape.value(a).item().as_f64()),
        transmission_coords: pair(tape.value(out.transmission_coords), 0),
        transmission_flow: pair(tape.value(out.transmission_flow), 0),
        obstruction_coords: out.obstruction_coords.map(|v| pair(tape.value(v), 0)),
        obstruction_flow: out.obstruction_flow.map(|v| pair(tape.value(v), 0)),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    Transmission,
    Obstruction,
    Alpha,
    Composite,
}

impl std::str::FromStr for LayerKind {
    type Err = LayerError;
    fn from_str(s: &str) -> Result<Self, LayerError> {
        match s {
            "transmission" => Ok(Self::Transmission),
            "obstruction" => Ok(Self::Obstruction),
            "alpha" => Ok(Self::Alpha),
            "composite" => Ok(Self::Composite),
            other => Err(LayerError::UnknownLayer(other.to_string())),
        }
    }
}

/// Every per-pixel output for one view.
#[derive(Clone, Debug)]
pub struct ViewRender {
    pub composite: Image,
    pub transmission: Image,
    pub obstruction: Option<Image>,
    pub alpha: Option<Image>,
    /// Per-pixel flow in field units, two channels.
    pub transmission_flow: Image,
    pub obstruction_flow: Option<Image>,
}

const RENDER_CHUNK: usize = 4096;

fn pixel_centers(width: usize, height: usize) -> Vec<(f64, f64)> {
    let mut px = Vec::with_capacity(width * height);
    for y in 0..height {
        for x in 0..width {
            px.push(((x as f64 + 0.5) / width as f64, (y as f64 + 0.5) / height as f64));
        }
    }
    px
}

struct ChunkOut {
    composite: Vec<f32>,
    transmission: Vec<f32>,
    obstruction: Vec<f32>,
    alpha: Vec<f32>,
    tr_flow: Vec<f32>,
    ob_flow: Vec<f32>,
}

fn to_f32<T: Real>(t: &Tensor<T>) -> Vec<f32> {
    t.data().iter().map(|x| x.as_f64() as f32).collect()
}

/// Per-pixel evaluation. `camera` replays the full camera model at `t`;
/// otherwise each layer is read canonically at the pixel centers (zero
/// camera offset) with its flow at `t`.
fn render_pixels<T: Real>(
    scene: &SceneModel<T>,
    width: usize,
    height: usize,
    t: f64,
    camera: bool,
    alpha_override: Option<f64>,
) -> Result<ViewRender, LayerError> {
    if width == 0 || height == 0 {
        return Err(LayerError::Resolution(width, height));
    }
    let active = scene.full_levels();
    let pixels = pixel_centers(width, height);
    let chunks: Vec<&[(f64, f64)]> = pixels.chunks(RENDER_CHUNK).collect();
    let outs = chunks
        .par_iter()
        .map(|chunk| -> Result<ChunkOut, LayerError> {
            let mut tape = Tape::new();
            let vars = scene.bind_frozen(&mut tape);
            let out = if camera {
                let px: Vec<(f64, f64, f64)> = chunk.iter().map(|&(u, v)| (u, v, t)).collect();
                let rays = RayBatch::new(&px, scene.intrinsics(), &scene.pose);
                composite_op(&mut tape, scene, &vars, &rays, &active, alpha_override)?
            } else {
                canonical_op(&mut tape, scene, &vars, chunk, t, &active)?
            };
            let n = chunk.len();
            Ok(ChunkOut {
                composite: to_f32(tape.value(out.color)),
                transmission: to_f32(tape.value(out.transmission)),
                obstruction: out.obstruction.map_or_else(Vec::new, |v| to_f32(tape.value(v))),
                alpha: match (alpha_override, out.alpha) {
                    (_, Some(a)) => to_f32(tape.value(a)),
                    (Some(a), None) => vec![a as f32; n],
                    (None, None) => vec![0.0; n],
                },
                tr_flow: to_f32(tape.value(out.transmission_flow)),
                ob_flow: out.obstruction_flow.map_or_else(Vec::new, |v| to_f32(tape.value(v))),
            })
        })
        .collect::<Result<Vec<_>, _>>()?;
    let cat = |f: &dyn Fn(&ChunkOut) -> &Vec<f32>| outs.iter().flat_map(|o| f(o).iter().copied()).collect::<Vec<_>>();
    let two = scene.obstruction.is_some();
    let img = |c: usize, data: Vec<f32>| Image::new(width, height, c, data).expect("render buffer size");
    Ok(ViewRender {
        composite: img(3, cat(&|o| &o.composite)),
        transmission: img(3, cat(&|o| &o.transmission)),
        obstruction: two.then(|| img(3, cat(&|o| &o.obstruction))),
        alpha: two.then(|| img(1, cat(&|o| &o.alpha))),
        transmission_flow: img(2, cat(&|o| &o.tr_flow)),
        obstruction_flow: two.then(|| img(2, cat(&|o| &o.ob_flow))),
    })
}

fn canonical_op<'a, T: Real>(
    tape: &mut Tape<'a, T>,
    scene: &SceneModel<T>,
    vars: &SceneVars,
    pixels: &[(f64, f64)],
    t: f64,
    active: &ActiveLevels,
) -> Result<CompositeVars, DiffError> {
    let n = pixels.len();
    let coords: Vec<T> = pixels.iter().flat_map(|&(u, v)| [T::lit(u), T::lit(v)]).collect();
    let times = vec![T::lit(t); n];
    let c = tape.constant(Tensor::new(vec![n, 2], coords)?);
    let (tr, tr_w, tr_f) = layer_sample(
        tape,
        &scene.transmission,
        &vars.transmission,
        c,
        &times,
        active.transmission_image,
        active.transmission_flow,
    )?;
    let mut out = CompositeVars {
        color: tr,
        transmission: tr,
        obstruction: None,
        alpha: None,
        transmission_coords: tr_w,
        transmission_flow: tr_f,
        obstruction_coords: None,
        obstruction_flow: None,
    };
    if let (Some(o), Some(ov), Some(a), Some(av)) = (&scene.obstruction, &vars.obstruction, &scene.alpha, &vars.alpha) {
        let (ob, ob_w, ob_f) = layer_sample(tape, o, ov, c, &times, active.obstruction_image, active.obstruction_flow)?;
        let logit = a.apply(tape, av, ob_w, active.alpha)?;
        let logit = tape.scale(logit, T::lit(scene.tau()));
        let alpha = tape.sigmoid(logit);
        let diff = tape.sub(ob, tr)?;
        let diff = tape.mul_col(diff, alpha)?;
        out.color = tape.add(tr, diff)?;
        out.obstruction = Some(ob);
        out.alpha = Some(alpha);
        out.obstruction_coords = Some(ob_w);
        out.obstruction_flow = Some(ob_f);
    }
    Ok(out)
}

/// Rasterize one layer. Transmission, obstruction and alpha are canonical
/// reads; composite replays the camera at `t`.
pub fn render_layer<T: Real>(
    scene: &SceneModel<T>,
    which: LayerKind,
    width: usize,
    height: usize,
    t: f64,
    alpha_override: Option<f64>,
) -> Result<Image, LayerError> {
    match which {
        LayerKind::Composite => Ok(render_pixels(scene, width, height, t, true, alpha_override)?.composite),
        LayerKind::Transmission => Ok(render_pixels(scene, width, height, t, false, None)?.transmission),
        LayerKind::Obstruction => {
            render_pixels(scene, width, height, t, false, None)?.obstruction.ok_or(LayerError::NoObstruction)
        }
        LayerKind::Alpha => render_pixels(scene, width, height, t, false, None)?.alpha.ok_or(LayerError::NoObstruction),
    }
}

/// All layers as seen from the camera at `t`.
pub fn render_view<T: Real>(
    scene: &SceneModel<T>,
    width: usize,
    height: usize,
    t: f64,
    alpha_override: Option<f64>,
) -> Result<ViewRender, LayerError> {
    render_pixels(scene, width, height, t, true, alpha_override)
}

/// All layers read canonically with flow at `t`.
pub fn render_canonical<T: Real>(scene: &SceneModel<T>, width: usize, height: usize, t: f64) -> Result<ViewRender, LayerError> {
    render_pixels(scene, width, height, t, false, None)
}
