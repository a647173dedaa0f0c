//! Scene descriptions: a JSON schema, built-in presets, and the driver
//! that runs a configured world and writes its outputs.
//!
//! A scene file fixes everything a run needs — integration scheme, solver
//! and contact tunables, bodies, welds, output cadence — so a run is fully
//! reproducible from the file alone. Unknown fields are rejected, and
//! parse errors carry a JSON-pointer-style location.

use std::path::{Path, PathBuf};

use nalgebra::Vector3;
use serde::Deserialize;

use crate::constraints::{ContactParams, Shape, WeldSpec, WeldTarget};
use crate::dynamics::{
    Body, DeformableBody, ForceProfile, RigidPrismatic, SchemeParams, StepDiagnostics, World,
};
use crate::error::{Error, Result};
use crate::io::{read_vtk, snapshot_deformable, write_vtk, DiagnosticsWriter, SolverTraceWriter};
use crate::material::{LameParams, RayleighParams};
use crate::mesh::TetMesh;
use crate::shapes;
use crate::solver::SolverParams;

fn default_gravity() -> [f64; 3] {
    [0.0, 0.0, -9.81]
}

fn default_steps() -> u64 {
    100
}

fn default_theta() -> f64 {
    1.0
}

fn one() -> f64 {
    1.0
}

/// Top-level scene document.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneConfig {
    #[serde(default)]
    pub description: Option<String>,
    #[serde(default = "default_gravity")]
    pub gravity: [f64; 3],
    pub scheme: SchemeConfig,
    #[serde(default)]
    pub solver: SolverConfig,
    #[serde(default)]
    pub contact: ContactConfig,
    pub bodies: Vec<BodyConfig>,
    #[serde(default)]
    pub welds: Vec<WeldConfig>,
    #[serde(default)]
    pub output: OutputConfig,
    #[serde(default = "default_steps")]
    pub steps: u64,
    /// Reserved for preset generators that randomize initial conditions.
    #[serde(default)]
    pub seed: u64,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SchemeConfig {
    #[serde(default = "default_theta")]
    pub theta: f64,
    #[serde(default = "default_theta")]
    pub theta_vq: f64,
    pub dt: f64,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverConfig {
    pub tolerance: f64,
    pub max_iterations: usize,
    pub ls_rho: f64,
    pub ls_c: f64,
    pub ls_max: usize,
}

impl Default for SolverConfig {
    fn default() -> Self {
        let p = SolverParams::default();
        SolverConfig {
            tolerance: p.tolerance,
            max_iterations: p.max_iterations,
            ls_rho: p.ls_rho,
            ls_c: p.ls_c,
            ls_max: p.ls_max,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ContactConfig {
    pub margin: f64,
    pub stiffness: f64,
    pub tau_d: Option<f64>,
    pub sigma: f64,
    pub v_hat_max: f64,
}

impl Default for ContactConfig {
    fn default() -> Self {
        let p = ContactParams::default();
        ContactConfig {
            margin: p.margin,
            stiffness: p.stiffness,
            tau_d: p.tau_d,
            sigma: p.sigma,
            v_hat_max: p.v_hat_max,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputConfig {
    /// Snapshot cadence in steps; absent means no snapshots.
    pub snapshot_every: Option<u64>,
    /// Also write the per-iteration solver trace CSV.
    pub solver_trace: bool,
}

#[allow(clippy::derivable_impls)]
impl Default for OutputConfig {
    fn default() -> Self {
        OutputConfig {
            snapshot_every: None,
            solver_trace: false,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RayleighConfig {
    pub alpha: f64,
    pub beta: f64,
}

impl Default for RayleighConfig {
    fn default() -> Self {
        let r = RayleighParams::default();
        RayleighConfig {
            alpha: r.alpha,
            beta: r.beta,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum BodyConfig {
    Deformable {
        mesh: MeshConfig,
        young: f64,
        poisson: f64,
        density: f64,
        #[serde(default)]
        rayleigh: RayleighConfig,
        #[serde(default)]
        friction: f64,
        #[serde(default)]
        translate: [f64; 3],
        #[serde(default)]
        initial_velocity: [f64; 3],
    },
    Prismatic {
        shape: ShapeConfig,
        axis: [f64; 3],
        mass: f64,
        force: ForceConfig,
        #[serde(default)]
        friction: f64,
        #[serde(default)]
        initial_travel: f64,
        #[serde(default)]
        initial_speed: f64,
    },
    Static {
        shape: ShapeConfig,
        #[serde(default = "one")]
        friction: f64,
    },
}

#[derive(Debug, Clone, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum MeshConfig {
    /// Load points and tets from a snapshot-format file, relative to the
    /// scene file's directory.
    Vtk { path: String },
    /// Axis-aligned block lattice anchored at the origin.
    Cube {
        divisions: [usize; 3],
        size: [f64; 3],
    },
    Inline {
        vertices: Vec<[f64; 3]>,
        elements: Vec<[usize; 4]>,
    },
}

#[derive(Debug, Clone, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum ShapeConfig {
    HalfSpace { normal: [f64; 3], offset: f64 },
    Sphere { center: [f64; 3], radius: f64 },
    Box { center: [f64; 3], half_extents: [f64; 3] },
}

#[derive(Debug, Clone, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum ForceConfig {
    Constant { force: f64 },
    Ramp {
        from: f64,
        to: f64,
        t_start: f64,
        t_end: f64,
    },
}

#[derive(Debug, Clone, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum VertexRef {
    /// Direct vertex index.
    Index(usize),
    /// The mesh vertex nearest this point (resolved against the rest
    /// configuration after `translate`).
    Nearest([f64; 3]),
}

#[derive(Debug, Clone, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum WeldTargetConfig {
    World([f64; 3]),
    BodyVertex { body: usize, vertex: VertexRef },
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WeldConfig {
    pub body: usize,
    pub vertex: VertexRef,
    pub target: WeldTargetConfig,
}

/// Parse a scene document; errors carry the JSON-pointer of the offending
/// field.
pub fn parse_scene(text: &str) -> Result<SceneConfig> {
    let de = &mut serde_json::Deserializer::from_str(text);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let raw = e.path().to_string();
        let pointer = if raw.is_empty() || raw == "." {
            "/".to_string()
        } else {
            format!(
                "/{}",
                raw.replace('[', ".").replace(']', "").replace('.', "/")
            )
        };
        Error::Scene {
            pointer,
            message: e.inner().to_string(),
        }
    })
}

fn scene_err(pointer: impl Into<String>, message: impl Into<String>) -> Error {
    Error::Scene {
        pointer: pointer.into(),
        message: message.into(),
    }
}

fn vec3(a: [f64; 3]) -> Vector3<f64> {
    Vector3::new(a[0], a[1], a[2])
}

fn unit_or_err(a: [f64; 3], pointer: &str) -> Result<Vector3<f64>> {
    let v = vec3(a);
    let n = v.norm();
    if n < 1e-12 {
        return Err(scene_err(pointer, "direction must be nonzero"));
    }
    Ok(v / n)
}

fn build_shape(cfg: &ShapeConfig, pointer: &str) -> Result<Shape> {
    match cfg {
        ShapeConfig::HalfSpace { normal, offset } => Ok(Shape::HalfSpace {
            normal: unit_or_err(*normal, &format!("{pointer}/half_space/normal"))?,
            offset: *offset,
        }),
        ShapeConfig::Sphere { center, radius } => {
            if *radius <= 0.0 {
                return Err(scene_err(
                    format!("{pointer}/sphere/radius"),
                    "radius must be positive",
                ));
            }
            Ok(Shape::Sphere {
                center: vec3(*center),
                radius: *radius,
            })
        }
        ShapeConfig::Box {
            center,
            half_extents,
        } => {
            if half_extents.iter().any(|&h| h <= 0.0) {
                return Err(scene_err(
                    format!("{pointer}/box/half_extents"),
                    "half extents must be positive",
                ));
            }
            Ok(Shape::Box {
                center: vec3(*center),
                half_extents: vec3(*half_extents),
            })
        }
    }
}

fn build_force(cfg: &ForceConfig) -> ForceProfile {
    match cfg {
        ForceConfig::Constant { force } => ForceProfile::Constant { force: *force },
        ForceConfig::Ramp {
            from,
            to,
            t_start,
            t_end,
        } => ForceProfile::Ramp {
            from: *from,
            to: *to,
            t_start: *t_start,
            t_end: *t_end,
        },
    }
}

fn build_mesh(
    cfg: &MeshConfig,
    density: f64,
    translate: [f64; 3],
    base_dir: &Path,
    pointer: &str,
) -> Result<TetMesh> {
    let (mut vertices, elements) = match cfg {
        MeshConfig::Vtk { path } => {
            let full = base_dir.join(path);
            let snap = read_vtk(&full)?;
            (snap.points, snap.cells)
        }
        MeshConfig::Cube { divisions, size } => {
            if divisions.iter().any(|&d| d == 0) {
                return Err(scene_err(
                    format!("{pointer}/mesh/cube/divisions"),
                    "divisions must be at least 1 per axis",
                ));
            }
            shapes::cube_lattice(*divisions, *size)
        }
        MeshConfig::Inline { vertices, elements } => (
            vertices.iter().map(|v| vec3(*v)).collect(),
            elements.clone(),
        ),
    };
    let t = vec3(translate);
    for v in &mut vertices {
        *v += t;
    }
    TetMesh::new(vertices, elements, density).map_err(|e| match e {
        Error::NonPositiveDensity(_) => {
            scene_err(format!("{pointer}/density"), "density must be positive")
        }
        other => scene_err(format!("{pointer}/mesh"), other.to_string()),
    })
}

fn resolve_vertex(mesh: &TetMesh, r: &VertexRef, pointer: &str) -> Result<usize> {
    match r {
        VertexRef::Index(i) => {
            if *i >= mesh.n_vertices() {
                Err(scene_err(
                    pointer,
                    format!("vertex {} out of range ({} vertices)", i, mesh.n_vertices()),
                ))
            } else {
                Ok(*i)
            }
        }
        VertexRef::Nearest(p) => {
            let target = vec3(*p);
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for (i, v) in mesh.vertices().iter().enumerate() {
                let d = (v - target).norm_squared();
                if d < best_d {
                    best_d = d;
                    best = i;
                }
            }
            Ok(best)
        }
    }
}

/// Instantiate the world a scene describes. `base_dir` anchors relative
/// mesh paths (normally the scene file's directory).
pub fn build_world(config: &SceneConfig, base_dir: &Path) -> Result<World> {
    if !(config.scheme.dt > 0.0) {
        return Err(scene_err("/scheme/dt", "time step must be positive"));
    }
    for (name, v) in [
        ("/scheme/theta", config.scheme.theta),
        ("/scheme/theta_vq", config.scheme.theta_vq),
    ] {
        if !(0.0..=1.0).contains(&v) {
            return Err(scene_err(name, "must lie in [0, 1]"));
        }
    }
    let scheme = SchemeParams {
        theta: config.scheme.theta,
        theta_vq: config.scheme.theta_vq,
        dt: config.scheme.dt,
    };
    let mut world = World::new(scheme);
    world.gravity = vec3(config.gravity);
    world.solver = SolverParams {
        tolerance: config.solver.tolerance,
        max_iterations: config.solver.max_iterations,
        ls_rho: config.solver.ls_rho,
        ls_c: config.solver.ls_c,
        ls_max: config.solver.ls_max,
    };
    world.contact = ContactParams {
        margin: config.contact.margin,
        stiffness: config.contact.stiffness,
        tau_d: config.contact.tau_d,
        sigma: config.contact.sigma,
        v_hat_max: config.contact.v_hat_max,
    };

    for (i, body) in config.bodies.iter().enumerate() {
        let pointer = format!("/bodies/{i}");
        match body {
            BodyConfig::Deformable {
                mesh,
                young,
                poisson,
                density,
                rayleigh,
                friction,
                translate,
                initial_velocity,
            } => {
                if *friction < 0.0 {
                    return Err(scene_err(
                        format!("{pointer}/friction"),
                        "friction must be non-negative",
                    ));
                }
                let lame = LameParams::from_young_poisson(*young, *poisson)
                    .map_err(|e| scene_err(&pointer, e.to_string()))?;
                let tet = build_mesh(mesh, *density, *translate, base_dir, &pointer)?;
                let mut d = DeformableBody::new(
                    tet,
                    lame,
                    RayleighParams {
                        alpha: rayleigh.alpha,
                        beta: rayleigh.beta,
                    },
                    *friction,
                )
                .map_err(|e| scene_err(format!("{pointer}/mesh"), e.to_string()))?;
                let v0 = vec3(*initial_velocity);
                for k in 0..d.mesh.n_vertices() {
                    d.v.fixed_rows_mut::<3>(3 * k).copy_from(&v0);
                }
                world.add_deformable(d);
            }
            BodyConfig::Prismatic {
                shape,
                axis,
                mass,
                force,
                friction,
                initial_travel,
                initial_speed,
            } => {
                if *mass <= 0.0 {
                    return Err(scene_err(format!("{pointer}/mass"), "mass must be positive"));
                }
                world.add_prismatic(RigidPrismatic {
                    shape: build_shape(shape, &pointer)?,
                    axis: unit_or_err(*axis, &format!("{pointer}/axis"))?,
                    mass: *mass,
                    force: build_force(force),
                    friction: *friction,
                    s: *initial_travel,
                    v: *initial_speed,
                });
            }
            BodyConfig::Static { shape, friction } => {
                world.add_static(build_shape(shape, &pointer)?, *friction);
            }
        }
    }

    for (i, weld) in config.welds.iter().enumerate() {
        let pointer = format!("/welds/{i}");
        let deformable_mesh = |body: usize, p: &str| -> Result<&TetMesh> {
            match world.bodies.get(body) {
                Some(Body::Deformable(d)) => Ok(&d.mesh),
                Some(_) => Err(scene_err(p, format!("body {body} is not deformable"))),
                None => Err(scene_err(p, format!("body {body} does not exist"))),
            }
        };
        let mesh = deformable_mesh(weld.body, &format!("{pointer}/body"))?;
        let vertex = resolve_vertex(mesh, &weld.vertex, &format!("{pointer}/vertex"))?;
        let target = match &weld.target {
            WeldTargetConfig::World(p) => WeldTarget::World(vec3(*p)),
            WeldTargetConfig::BodyVertex { body, vertex } => {
                let mesh = deformable_mesh(*body, &format!("{pointer}/target/body_vertex/body"))?;
                let v = resolve_vertex(
                    mesh,
                    vertex,
                    &format!("{pointer}/target/body_vertex/vertex"),
                )?;
                WeldTarget::BodyVertex { body: *body, vertex: v }
            }
        };
        world.add_weld(WeldSpec {
            body: weld.body,
            vertex,
            target,
        });
    }
    Ok(world)
}

/// Parsed `key=value` knobs after a preset name.
struct Knobs {
    entries: Vec<(String, String)>,
}

impl Knobs {
    fn parse(s: &str) -> Result<Knobs> {
        let mut entries = Vec::new();
        if !s.is_empty() {
            for part in s.split(',') {
                let (k, v) = part.split_once('=').ok_or_else(|| {
                    scene_err("/", format!("malformed preset knob {part:?}, expected key=value"))
                })?;
                entries.push((k.trim().to_string(), v.trim().to_string()));
            }
        }
        Ok(Knobs { entries })
    }

    fn f64(&self, key: &str, default: f64) -> Result<f64> {
        match self.entries.iter().find(|(k, _)| k == key) {
            Some((_, v)) => v
                .parse()
                .map_err(|_| scene_err("/", format!("knob {key}={v} is not a number"))),
            None => Ok(default),
        }
    }

    fn usize(&self, key: &str, default: usize) -> Result<usize> {
        match self.entries.iter().find(|(k, _)| k == key) {
            Some((_, v)) => v
                .parse()
                .map_err(|_| scene_err("/", format!("knob {key}={v} is not an integer"))),
            None => Ok(default),
        }
    }

    fn check_known(&self, known: &[&str]) -> Result<()> {
        for (k, _) in &self.entries {
            if !known.contains(&k.as_str()) {
                return Err(scene_err(
                    "/",
                    format!("unknown preset knob {k:?}; known knobs: {known:?}"),
                ));
            }
        }
        Ok(())
    }
}

fn json_scene(value: serde_json::Value) -> SceneConfig {
    // presets are constructed in-process; a failure here is a programming
    // error, not bad user input
    serde_json::from_value(value).expect("preset must satisfy its own schema")
}

fn drop_preset(knobs: &Knobs) -> Result<SceneConfig> {
    knobs.check_known(&["mu", "height", "young", "dt", "divisions", "steps"])?;
    let mu = knobs.f64("mu", 0.5)?;
    let height = knobs.f64("height", 0.2)?;
    let young = knobs.f64("young", 1e6)?;
    let dt = knobs.f64("dt", 0.005)?;
    let n = knobs.usize("divisions", 2)?;
    let steps = knobs.usize("steps", 120)? as u64;
    let mut cfg = json_scene(serde_json::json!({
        "description": "0.1 m elastic cube dropped onto a frictional floor",
        "scheme": { "dt": dt },
        "bodies": [
            {
                "type": "deformable",
                "mesh": { "cube": { "divisions": [n, n, n], "size": [0.1, 0.1, 0.1] } },
                "young": young,
                "poisson": 0.3,
                "density": 1000.0,
                "friction": mu,
                "translate": [0.0, 0.0, height]
            },
            {
                "type": "static",
                "shape": { "half_space": { "normal": [0.0, 0.0, 1.0], "offset": 0.0 } },
                "friction": mu
            }
        ],
        "output": { "snapshot_every": 10 }
    }));
    cfg.steps = steps;
    Ok(cfg)
}

fn compression_preset(knobs: &Knobs) -> Result<SceneConfig> {
    knobs.check_known(&["divisions", "force", "young", "dt", "steps", "mu"])?;
    let n = knobs.usize("divisions", 2)?;
    let force = knobs.f64("force", -400.0)?;
    let young = knobs.f64("young", 1e5)?;
    let dt = knobs.f64("dt", 0.01)?;
    let steps = knobs.usize("steps", 150)? as u64;
    let mu = knobs.f64("mu", 0.0)?;
    let mut cfg = json_scene(serde_json::json!({
        "description": "0.2 m cube squeezed between a driven plate and the floor",
        "gravity": [0.0, 0.0, 0.0],
        "scheme": { "dt": dt },
        "bodies": [
            {
                "type": "deformable",
                "mesh": { "cube": { "divisions": [n, n, n], "size": [0.2, 0.2, 0.2] } },
                "young": young,
                "poisson": 0.3,
                "density": 1000.0,
                "rayleigh": { "alpha": 1.0, "beta": 0.02 },
                "friction": mu
            },
            {
                "type": "static",
                "shape": { "half_space": { "normal": [0.0, 0.0, 1.0], "offset": 0.0 } },
                "friction": mu
            },
            {
                "type": "prismatic",
                "shape": { "half_space": { "normal": [0.0, 0.0, -1.0], "offset": -0.201 } },
                "axis": [0.0, 0.0, 1.0],
                "mass": 10.0,
                "force": { "ramp": { "from": 0.0, "to": force, "t_start": 0.0, "t_end": 1.0 } },
                "friction": mu
            }
        ]
    }));
    cfg.steps = steps;
    Ok(cfg)
}

fn arch_preset(knobs: &Knobs) -> Result<SceneConfig> {
    knobs.check_known(&["mu", "dt", "steps", "blocks", "young"])?;
    let mu = knobs.f64("mu", 1.0)?;
    let dt = knobs.f64("dt", 0.04)?;
    let steps = knobs.usize("steps", 75)? as u64;
    let blocks = knobs.usize("blocks", 9)?;
    let young = knobs.f64("young", 20e9)?;
    if blocks < 3 {
        return Err(scene_err("/", "arch needs at least 3 blocks"));
    }
    let r_inner = 0.2;
    let r_outer = 0.26;
    let depth = 0.05;
    let mut bodies = Vec::new();
    for b in 0..blocks {
        let a0 = std::f64::consts::PI * b as f64 / blocks as f64;
        let a1 = std::f64::consts::PI * (b + 1) as f64 / blocks as f64;
        let (vertices, elements) = shapes::arch_voussoir(r_inner, r_outer, a0, a1, depth, [3, 1, 2]);
        let verts: Vec<[f64; 3]> = vertices.iter().map(|v| [v.x, v.y, v.z]).collect();
        bodies.push(serde_json::json!({
            "type": "deformable",
            "mesh": { "inline": { "vertices": verts, "elements": elements } },
            "young": young,
            "poisson": 0.3,
            "density": 2300.0,
            "rayleigh": { "alpha": 0.0, "beta": 0.01 },
            "friction": mu
        }));
    }
    let r_mid = 0.5 * (r_inner + r_outer);
    for side in [1.0, -1.0] {
        bodies.push(serde_json::json!({
            "type": "static",
            "shape": { "box": {
                "center": [side * r_mid, 0.025, -0.05],
                "half_extents": [0.006, 0.05, 0.05]
            } },
            "friction": mu
        }));
    }
    bodies.push(serde_json::json!({
        "type": "static",
        "shape": { "half_space": { "normal": [0.0, 0.0, 1.0], "offset": -0.1 } },
        "friction": mu
    }));
    let mut cfg = json_scene(serde_json::json!({
        "description": "semicircular voussoir arch on narrow supports",
        "scheme": { "dt": dt },
        // collapse dynamics pile many sliding contacts into single steps;
        // give Newton more room than the default before declaring failure
        "solver": { "max_iterations": 300 },
        "bodies": bodies
    }));
    cfg.steps = steps;
    Ok(cfg)
}

fn weld_swing_preset(knobs: &Knobs) -> Result<SceneConfig> {
    knobs.check_known(&["dt", "steps", "young"])?;
    let dt = knobs.f64("dt", 0.01)?;
    let steps = knobs.usize("steps", 100)? as u64;
    let young = knobs.f64("young", 1e7)?;
    let mut cfg = json_scene(serde_json::json!({
        "description": "bar welded to two world points at one end, swinging under gravity",
        "scheme": { "dt": dt },
        "bodies": [
            {
                "type": "deformable",
                "mesh": { "cube": { "divisions": [6, 1, 1], "size": [0.3, 0.05, 0.05] } },
                "young": young,
                "poisson": 0.3,
                "density": 1000.0,
                "friction": 0.5
            }
        ],
        "welds": [
            {
                "body": 0,
                "vertex": { "nearest": [0.0, 0.0, 0.05] },
                "target": { "world": [0.0, 0.0, 0.05] }
            },
            {
                "body": 0,
                "vertex": { "nearest": [0.0, 0.05, 0.05] },
                "target": { "world": [0.0, 0.05, 0.05] }
            }
        ]
    }));
    cfg.steps = steps;
    Ok(cfg)
}

/// Built-in scenes: `"name"` or `"name:knob=value,knob=value"`.
/// Available presets: `drop`, `compression`, `arch`, `weld-swing`.
pub fn generate_scene(spec: &str) -> Result<SceneConfig> {
    let (name, rest) = match spec.split_once(':') {
        Some((n, r)) => (n, r),
        None => (spec, ""),
    };
    let knobs = Knobs::parse(rest)?;
    match name {
        "drop" => drop_preset(&knobs),
        "compression" => compression_preset(&knobs),
        "arch" => arch_preset(&knobs),
        "weld-swing" => weld_swing_preset(&knobs),
        other => Err(scene_err(
            "/",
            format!(
                "unknown preset {other:?}; available: drop, compression, arch, weld-swing"
            ),
        )),
    }
}

/// Where and what a run writes.
#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub out_dir: Option<PathBuf>,
    pub snapshot_every: Option<u64>,
    pub solver_trace: bool,
    pub dump_matrices: bool,
}

/// Aggregate of a completed (or partially completed) run.
#[derive(Debug, Clone)]
pub struct RunSummary {
    pub steps_completed: u64,
    pub sim_time: f64,
    pub wall_seconds: f64,
    /// Simulated seconds per wall second.
    pub realtime_rate: f64,
    pub constraints_avg: f64,
    pub constraints_max: usize,
    pub solver_iters_avg: f64,
    pub diagnostics: Vec<StepDiagnostics>,
}

impl RunSummary {
    /// One-line run report for terminals and logs.
    pub fn table_line(&self) -> String {
        format!(
            "steps={} sim_time={:.4}s wall={:.3}s rate={:.2}x constraints_avg={:.1} constraints_max={} newton_iters_avg={:.2}",
            self.steps_completed,
            self.sim_time,
            self.wall_seconds,
            self.realtime_rate,
            self.constraints_avg,
            self.constraints_max,
            self.solver_iters_avg
        )
    }
}

fn write_snapshots(world: &World, dir: &Path, step: u64) -> Result<()> {
    for (i, body) in world.bodies.iter().enumerate() {
        if let Body::Deformable(d) = body {
            let snap = snapshot_deformable(d);
            let path = dir.join(format!("body{i:02}_step{step:06}.vtk"));
            write_vtk(&path, &snap, &format!("body {i} at step {step}"))?;
        }
    }
    Ok(())
}

/// Advance `steps` steps, streaming diagnostics and snapshots as
/// configured. Output written before a failure is preserved and flushed.
pub fn run_simulation(world: &mut World, steps: u64, opts: &RunOptions) -> Result<RunSummary> {
    let wall_start = std::time::Instant::now();
    let mut writer = None;
    let mut trace = None;
    if let Some(dir) = &opts.out_dir {
        std::fs::create_dir_all(dir)?;
        writer = Some(DiagnosticsWriter::create(&dir.join("diagnostics.csv"))?);
        if opts.solver_trace {
            trace = Some(SolverTraceWriter::create(&dir.join("solver_trace.csv"))?);
        }
        if opts.dump_matrices {
            world.dump_matrices(dir)?;
        }
        if opts.snapshot_every.is_some() {
            write_snapshots(world, dir, 0)?;
        }
    }

    let mut diagnostics = Vec::with_capacity(steps as usize);
    let mut constraints_sum = 0usize;
    let mut constraints_max = 0usize;
    let mut iters_sum = 0usize;
    for k in 1..=steps {
        let diag = world.step()?;
        if let Some(w) = writer.as_mut() {
            w.write_step(&diag)?;
        }
        if let Some(t) = trace.as_mut() {
            t.write_step(&diag)?;
        }
        if let (Some(dir), Some(every)) = (&opts.out_dir, opts.snapshot_every) {
            if every > 0 && k % every == 0 {
                write_snapshots(world, dir, k)?;
            }
        }
        constraints_sum += diag.n_constraints;
        constraints_max = constraints_max.max(diag.n_constraints);
        iters_sum += diag.solver_iterations;
        diagnostics.push(diag);
    }
    let wall_seconds = wall_start.elapsed().as_secs_f64();
    let sim_time = steps as f64 * world.scheme.dt;
    let n = steps.max(1) as f64;
    Ok(RunSummary {
        steps_completed: steps,
        sim_time,
        wall_seconds,
        realtime_rate: sim_time / wall_seconds.max(1e-12),
        constraints_avg: constraints_sum as f64 / n,
        constraints_max,
        solver_iters_avg: iters_sum as f64 / n,
        diagnostics,
    })
}
