//! Map geometry configuration and the flat key=value config file format.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("unknown config key `{0}`")]
    UnknownKey(String),
    #[error("invalid value for `{key}`: {msg}")]
    InvalidValue { key: String, msg: String },
    #[error("{0}")]
    Invalid(String),
}

/// Range-dependent standard deviation of the sensor noise on each axis.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum NoiseModel {
    /// Constant standard deviation, independent of range.
    ConstantSigma(f64),
    /// Standard deviation grows linearly with range: rho(r) = sigma' * r.
    LinearSigma(f64),
}

impl NoiseModel {
    #[inline]
    pub fn rho(&self, range: f64) -> f64 {
        match *self {
            NoiseModel::ConstantSigma(s) => s,
            NoiseModel::LinearSigma(sp) => sp * range,
        }
    }
}

/// Which motion/birth model the map runs with.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MapMode {
    /// Initial velocity estimation plus the static/dynamic mixture model.
    Dynamic,
    /// Newborn particles get uniform random velocities; constant-velocity
    /// prediction only, no mixture model.
    Random,
    /// All particles static; prediction never moves them.
    Static,
}

impl MapMode {
    pub fn parse(s: &str) -> Option<MapMode> {
        match s {
            "dynamic" => Some(MapMode::Dynamic),
            "random" => Some(MapMode::Random),
            "static" => Some(MapMode::Static),
            _ => None,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            MapMode::Dynamic => "dynamic",
            MapMode::Random => "random",
            MapMode::Static => "static",
        }
    }
}

/// Geometry of the egocentric map: box size, voxel and pyramid division,
/// sensor field of view and noise model.
#[derive(Debug, Clone)]
pub struct MapConfig {
    /// Box side lengths (l_x, l_y, l_z) in meters; rounded up to voxel multiples.
    pub map_size: [f64; 3],
    /// Voxel subspace edge length l in meters.
    pub voxel_edge: f64,
    /// Pyramid subspace angle theta in radians; pi/theta must be an integer.
    pub pyramid_angle: f64,
    /// Horizontal and vertical field of view in radians.
    pub fov_h: f64,
    pub fov_v: f64,
    /// Robot sphere model radius; space closer than this is never updated.
    pub r_min: f64,
    /// Voxel filter resolution for point cloud pre-processing.
    pub filter_res: f64,
    /// Activation neighborhood half width; `None` derives it from the noise model.
    pub activation_n: Option<u32>,
    pub noise_model: NoiseModel,
    /// Density threshold below which a measurement is ignored in the update.
    pub epsilon: f64,
    /// Angular resolution of the sensor; sizes the per-pyramid measurement bins.
    pub theta_snsr: f64,
    /// Storage headroom factors for the voxel arena and the pyramid index.
    pub eta1: f64,
    pub eta2: f64,
}

impl Default for MapConfig {
    fn default() -> Self {
        MapConfig {
            map_size: [10.0, 10.0, 6.0],
            voxel_edge: 0.2,
            pyramid_angle: 3.0_f64.to_radians(),
            fov_h: 90.0_f64.to_radians(),
            fov_v: 60.0_f64.to_radians(),
            r_min: 0.15,
            filter_res: 0.1,
            activation_n: Some(1),
            noise_model: NoiseModel::LinearSigma(0.01),
            epsilon: 0.01,
            theta_snsr: 1.0_f64.to_radians(),
            eta1: 3.0,
            // the pyramid index capacity formula spreads L_max over the full
            // sphere; with a 90x60 FOV the particles concentrate in the
            // N_f = fov/theta^2 pyramids, a factor (2pi*pi)/(fov_h*fov_v)
            // denser, so the headroom factor absorbs that concentration
            eta2: 36.0,
        }
    }
}

impl MapConfig {
    /// Checks invariants and rounds the map size up to whole voxels.
    pub fn normalize(mut self) -> Result<Self, ConfigError> {
        if self.voxel_edge <= 0.0 {
            return Err(ConfigError::Invalid("voxel_edge must be > 0".into()));
        }
        if self.pyramid_angle <= 0.0 {
            return Err(ConfigError::Invalid("pyramid_angle must be > 0".into()));
        }
        let i = PI / self.pyramid_angle;
        if (i - i.round()).abs() > 1e-9 || i.round() < 1.0 {
            return Err(ConfigError::Invalid(format!(
                "pyramid_angle must divide pi; pi/theta = {i:.6} is not an integer"
            )));
        }
        if !(self.fov_v > 0.0 && self.fov_v < PI) {
            return Err(ConfigError::Invalid("fov_v must be in (0, pi)".into()));
        }
        if !(self.fov_h > 0.0 && self.fov_h <= 2.0 * PI + 1e-12) {
            return Err(ConfigError::Invalid("fov_h must be in (0, 2pi]".into()));
        }
        if self.r_min <= 0.0 {
            return Err(ConfigError::Invalid("r_min must be > 0".into()));
        }
        if self.filter_res <= 0.0 {
            return Err(ConfigError::Invalid("filter_res must be > 0".into()));
        }
        if self.eta1 < 1.0 || self.eta2 < 1.0 {
            return Err(ConfigError::Invalid("eta factors must be >= 1".into()));
        }
        for s in &mut self.map_size {
            if *s <= 0.0 {
                return Err(ConfigError::Invalid("map_size must be > 0".into()));
            }
            let cells = (*s / self.voxel_edge - 1e-9).ceil().max(1.0);
            *s = cells * self.voxel_edge;
        }
        if self.r_min >= self.r_max() {
            return Err(ConfigError::Invalid("r_min must be smaller than r_max".into()));
        }
        Ok(self)
    }

    /// Voxel counts along each axis.
    pub fn voxel_dims(&self) -> [usize; 3] {
        [
            (self.map_size[0] / self.voxel_edge).round() as usize,
            (self.map_size[1] / self.voxel_edge).round() as usize,
            (self.map_size[2] / self.voxel_edge).round() as usize,
        ]
    }

    /// Total number of voxel subspaces N_v.
    pub fn n_voxels(&self) -> usize {
        let d = self.voxel_dims();
        d[0] * d[1] * d[2]
    }

    /// Half diagonal of the map box.
    pub fn r_max(&self) -> f64 {
        0.5 * (self.map_size[0].powi(2) + self.map_size[1].powi(2) + self.map_size[2].powi(2))
            .sqrt()
    }
}

/// PHD filter parameters plus the feature switches that change its behavior.
#[derive(Debug, Clone)]
pub struct FilterParams {
    /// Detection probability of a point object.
    pub p_d: f64,
    /// Survival probability from one frame to the next.
    pub p_s: f64,
    /// Clutter intensity (expected false measurements per cubic meter).
    pub kappa: f64,
    /// Initial weight of a newborn particle.
    pub w_init: f64,
    /// Expected newborn mass per frame; overrides `w_init` when set.
    pub v_b: Option<f64>,
    /// Newborn particles generated per measurement point.
    pub l_b: u32,
    /// Global particle budget after resampling.
    pub l_max: u64,
    /// Speed threshold separating dynamic from possibly-static particles.
    pub v_hat: f64,
    /// Std of the Gaussian around the estimated newborn velocity.
    pub sigma_vb: f64,
    /// Velocity range for uniformly sampled newborn velocities.
    pub v_max: f64,
    /// Per-frame prediction noise std on position and velocity axes.
    pub q_pos_std: f64,
    pub q_vel_std: f64,
    pub mode: MapMode,
    /// Treat measurement-free FOV pyramids as fully visible in the update.
    pub empty_pyramid_visible: bool,
    /// Minimum live particles in a voxel before its mixture coefficients are trusted.
    pub dst_min_particles: u32,
    /// Unknown-space bookkeeping with zero-weight time particles.
    pub time_particles: bool,
    pub time_particles_per_voxel: u32,
}

impl Default for FilterParams {
    fn default() -> Self {
        FilterParams {
            p_d: 0.9,
            p_s: 0.9,
            kappa: 0.05,
            w_init: 1e-4,
            v_b: None,
            l_b: 14,
            l_max: 1_600_000,
            v_hat: 0.2,
            sigma_vb: 0.12,
            v_max: 5.0,
            q_pos_std: 0.01,
            q_vel_std: 0.02,
            mode: MapMode::Dynamic,
            empty_pyramid_visible: false,
            dst_min_particles: 3,
            time_particles: false,
            time_particles_per_voxel: 1,
        }
    }
}

impl FilterParams {
    pub fn validate(&self) -> Result<(), ConfigError> {
        let pos = [
            ("p_d", self.p_d),
            ("p_s", self.p_s),
            ("w_init", self.w_init),
            ("v_hat", self.v_hat),
            ("sigma_vb", self.sigma_vb),
            ("v_max", self.v_max),
        ];
        for (k, v) in pos {
            if v <= 0.0 {
                return Err(ConfigError::Invalid(format!("{k} must be > 0")));
            }
        }
        if self.p_d > 1.0 || self.p_s > 1.0 {
            return Err(ConfigError::Invalid("p_d and p_s must be <= 1".into()));
        }
        if self.q_pos_std < 0.0 || self.q_vel_std < 0.0 || self.kappa < 0.0 {
            return Err(ConfigError::Invalid("noise stds and kappa must be >= 0".into()));
        }
        if self.l_b == 0 || self.l_max == 0 {
            return Err(ConfigError::Invalid("l_b and l_max must be > 0".into()));
        }
        Ok(())
    }

    /// Per-voxel particle cap after resampling (L_max / N_v, at least one).
    pub fn per_voxel_cap(&self, n_voxels: usize) -> usize {
        ((self.l_max as usize) / n_voxels.max(1)).max(1)
    }
}

/// Initial velocity estimation parameters.
#[derive(Debug, Clone)]
pub struct EstimatorParams {
    /// Neighbor distance for Euclidean clustering; `None` means 2 * filter_res.
    pub cluster_dist: Option<f64>,
    pub min_cluster_size: usize,
    /// Weight of the point-count feature in the matching cost.
    pub w_count: f64,
    /// Points at or below this world height are labeled static ground.
    pub ground_height: f64,
}

impl Default for EstimatorParams {
    fn default() -> Self {
        EstimatorParams {
            cluster_dist: None,
            min_cluster_size: 5,
            w_count: 1.0,
            ground_height: 0.2,
        }
    }
}

/// Everything a mapping run needs, as read from one config file.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub map: MapConfig,
    pub filter: FilterParams,
    pub estimator: EstimatorParams,
    /// Occupancy query/export resolutions.
    pub resolutions: Vec<f64>,
    /// Radius of the particle ball used for object velocity readout.
    pub ball_radius: f64,
    /// Ground-truth velocity std used in the Bhattacharyya metric.
    pub sigma_gt: f64,
    /// Enable per-step noise injection in future occupancy prediction.
    pub prediction_noise: bool,
}

impl RunConfig {
    pub fn desk_profile() -> Self {
        let mut c = RunConfig::default();
        c.map.map_size = [8.0, 8.0, 3.0];
        c.map.voxel_edge = 0.3;
        c.filter.l_max = 200_000;
        c
    }

    pub fn normalize(mut self) -> Result<Self, ConfigError> {
        self.map = self.map.normalize()?;
        self.filter.validate()?;
        if self.resolutions.is_empty() {
            self.resolutions = vec![0.1, 0.2, 0.3];
        }
        Ok(self)
    }

    /// Parses the flat `key=value` format; `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = RunConfig::default();
        cfg.apply_text(text)?;
        cfg.normalize()
    }

    /// Applies key=value lines on top of the current values.
    pub fn apply_text(&mut self, text: &str) -> Result<(), ConfigError> {
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or(ConfigError::Parse {
                line: lineno + 1,
                msg: format!("expected key=value, got `{line}`"),
            })?;
            self.set(key.trim(), value.trim())
                .map_err(|e| match e {
                    ConfigError::UnknownKey(_) | ConfigError::InvalidValue { .. } => e,
                    other => ConfigError::Parse { line: lineno + 1, msg: other.to_string() },
                })?;
        }
        Ok(())
    }

    /// Sets one configuration key from its textual value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        fn f(key: &str, v: &str) -> Result<f64, ConfigError> {
            v.parse::<f64>().map_err(|_| ConfigError::InvalidValue {
                key: key.to_string(),
                msg: format!("`{v}` is not a number"),
            })
        }
        fn b(key: &str, v: &str) -> Result<bool, ConfigError> {
            match v {
                "true" | "1" | "yes" => Ok(true),
                "false" | "0" | "no" => Ok(false),
                _ => Err(ConfigError::InvalidValue {
                    key: key.to_string(),
                    msg: format!("`{v}` is not a boolean"),
                }),
            }
        }
        match key {
            "map_size_x" => self.map.map_size[0] = f(key, value)?,
            "map_size_y" => self.map.map_size[1] = f(key, value)?,
            "map_size_z" => self.map.map_size[2] = f(key, value)?,
            "voxel_edge" => self.map.voxel_edge = f(key, value)?,
            "pyramid_angle_deg" => self.map.pyramid_angle = f(key, value)?.to_radians(),
            "fov_h_deg" => self.map.fov_h = f(key, value)?.to_radians(),
            "fov_v_deg" => self.map.fov_v = f(key, value)?.to_radians(),
            "r_min" => self.map.r_min = f(key, value)?,
            "filter_res" => self.map.filter_res = f(key, value)?,
            "activation_n" => {
                self.map.activation_n = if value == "auto" {
                    None
                } else {
                    Some(f(key, value)? as u32)
                }
            }
            "noise_model" => {
                self.map.noise_model = match value {
                    "constant" => NoiseModel::ConstantSigma(match self.map.noise_model {
                        NoiseModel::ConstantSigma(s) => s,
                        _ => 0.05,
                    }),
                    "linear" => NoiseModel::LinearSigma(match self.map.noise_model {
                        NoiseModel::LinearSigma(s) => s,
                        _ => 0.01,
                    }),
                    _ => {
                        return Err(ConfigError::InvalidValue {
                            key: key.to_string(),
                            msg: "expected `constant` or `linear`".into(),
                        })
                    }
                }
            }
            "sigma" => self.map.noise_model = NoiseModel::ConstantSigma(f(key, value)?),
            "sigma_prime" => self.map.noise_model = NoiseModel::LinearSigma(f(key, value)?),
            "epsilon" => self.map.epsilon = f(key, value)?,
            "theta_snsr_deg" => self.map.theta_snsr = f(key, value)?.to_radians(),
            "eta1" => self.map.eta1 = f(key, value)?,
            "eta2" => self.map.eta2 = f(key, value)?,
            "p_d" => self.filter.p_d = f(key, value)?,
            "p_s" => self.filter.p_s = f(key, value)?,
            "kappa" => self.filter.kappa = f(key, value)?,
            "w_init" => self.filter.w_init = f(key, value)?,
            "v_b" => self.filter.v_b = Some(f(key, value)?),
            "l_b" => self.filter.l_b = f(key, value)? as u32,
            "l_max" => self.filter.l_max = f(key, value)? as u64,
            "v_hat" => self.filter.v_hat = f(key, value)?,
            "sigma_vb" => self.filter.sigma_vb = f(key, value)?,
            "v_max" => self.filter.v_max = f(key, value)?,
            "q_pos_std" => self.filter.q_pos_std = f(key, value)?,
            "q_vel_std" => self.filter.q_vel_std = f(key, value)?,
            "mode" => {
                self.filter.mode = MapMode::parse(value).ok_or(ConfigError::InvalidValue {
                    key: key.to_string(),
                    msg: "expected dynamic|random|static".into(),
                })?
            }
            "empty_pyramid_visible" => self.filter.empty_pyramid_visible = b(key, value)?,
            "dst_min_particles" => self.filter.dst_min_particles = f(key, value)? as u32,
            "time_particles" => self.filter.time_particles = b(key, value)?,
            "time_particles_per_voxel" => {
                self.filter.time_particles_per_voxel = f(key, value)? as u32
            }
            "cluster_dist" => self.estimator.cluster_dist = Some(f(key, value)?),
            "min_cluster_size" => self.estimator.min_cluster_size = f(key, value)? as usize,
            "w_count" => self.estimator.w_count = f(key, value)?,
            "ground_height" => self.estimator.ground_height = f(key, value)?,
            "resolutions" => {
                let mut rs = Vec::new();
                for part in value.split(',') {
                    rs.push(f(key, part.trim())?);
                }
                self.resolutions = rs;
            }
            "ball_radius" => self.ball_radius = f(key, value)?,
            "sigma_gt" => self.sigma_gt = f(key, value)?,
            "prediction_noise" => self.prediction_noise = b(key, value)?,
            _ => return Err(ConfigError::UnknownKey(key.to_string())),
        }
        Ok(())
    }

    /// Renders the configuration as a documented key=value file.
    pub fn dump(&self) -> String {
        let mut out = String::new();
        let mut push = |comment: &str, key: &str, value: String| {
            if !comment.is_empty() {
                out.push_str(&format!("# {comment}\n"));
            }
            out.push_str(&format!("{key}={value}\n"));
        };
        push("map box size in meters, centered on the robot", "map_size_x", fmt_f(self.map.map_size[0]));
        push("", "map_size_y", fmt_f(self.map.map_size[1]));
        push("", "map_size_z", fmt_f(self.map.map_size[2]));
        push("voxel subspace edge length (m)", "voxel_edge", fmt_f(self.map.voxel_edge));
        push("pyramid subspace angle; must divide 180", "pyramid_angle_deg", fmt_f(self.map.pyramid_angle.to_degrees()));
        push("sensor field of view", "fov_h_deg", fmt_f(self.map.fov_h.to_degrees()));
        push("", "fov_v_deg", fmt_f(self.map.fov_v.to_degrees()));
        push("robot sphere model radius (m); closer space is never updated", "r_min", fmt_f(self.map.r_min));
        push("voxel filter resolution for input clouds (m)", "filter_res", fmt_f(self.map.filter_res));
        push("activation neighborhood half width, or `auto` to derive from the noise model", "activation_n",
            self.map.activation_n.map_or("auto".into(), |n| n.to_string()));
        match self.map.noise_model {
            NoiseModel::ConstantSigma(s) => {
                push("sensor noise std, constant (m)", "sigma", fmt_f(s));
            }
            NoiseModel::LinearSigma(s) => {
                push("sensor noise std per meter of range", "sigma_prime", fmt_f(s));
            }
        }
        push("density threshold for skipping far measurements", "epsilon", fmt_f(self.map.epsilon));
        push("sensor angular resolution; sizes measurement bins", "theta_snsr_deg", fmt_f(self.map.theta_snsr.to_degrees()));
        push("storage headroom factors", "eta1", fmt_f(self.map.eta1));
        push("", "eta2", fmt_f(self.map.eta2));
        push("detection probability", "p_d", fmt_f(self.filter.p_d));
        push("survival probability", "p_s", fmt_f(self.filter.p_s));
        push("clutter intensity per cubic meter", "kappa", fmt_f(self.filter.kappa));
        push("initial weight of a newborn particle", "w_init", fmt_f(self.filter.w_init));
        if let Some(vb) = self.filter.v_b {
            push("expected newborn mass per frame (overrides w_init)", "v_b", fmt_f(vb));
        }
        push("newborn particles per measurement point", "l_b", self.filter.l_b.to_string());
        push("global particle budget after resampling", "l_max", self.filter.l_max.to_string());
        push("dynamic/static speed threshold (m/s)", "v_hat", fmt_f(self.filter.v_hat));
        push("std of Gaussian newborn velocities around the estimate", "sigma_vb", fmt_f(self.filter.sigma_vb));
        push("range of uniformly sampled newborn velocities (m/s)", "v_max", fmt_f(self.filter.v_max));
        push("per-frame prediction noise stds", "q_pos_std", fmt_f(self.filter.q_pos_std));
        push("", "q_vel_std", fmt_f(self.filter.q_vel_std));
        push("map variant: dynamic | random | static", "mode", self.filter.mode.name().into());
        push("treat measurement-free FOV pyramids as fully visible", "empty_pyramid_visible", self.filter.empty_pyramid_visible.to_string());
        push("min live particles before mixture coefficients are trusted", "dst_min_particles", self.filter.dst_min_particles.to_string());
        push("unknown-space bookkeeping with time particles", "time_particles", self.filter.time_particles.to_string());
        push("", "time_particles_per_voxel", self.filter.time_particles_per_voxel.to_string());
        push("clustering neighbor distance (m); defaults to 2*filter_res", "cluster_dist",
            self.estimator.cluster_dist.map_or(format!("{}", fmt_f(2.0 * self.map.filter_res)), fmt_f));
        push("minimum cluster size", "min_cluster_size", self.estimator.min_cluster_size.to_string());
        push("weight of the point-count feature in cluster matching", "w_count", fmt_f(self.estimator.w_count));
        push("ground segmentation height threshold (m)", "ground_height", fmt_f(self.estimator.ground_height));
        push("occupancy export resolutions (m)", "resolutions",
            self.resolutions.iter().map(|r| fmt_f(*r)).collect::<Vec<_>>().join(","));
        push("particle ball radius for object velocity readout (m)", "ball_radius", fmt_f(self.ball_radius));
        push("ground-truth velocity std for the Bhattacharyya metric", "sigma_gt", fmt_f(self.sigma_gt));
        push("inject per-step noise in future occupancy prediction", "prediction_noise", self.prediction_noise.to_string());
        out
    }

    /// Flat snapshot of every key, for run manifests.
    pub fn snapshot(&self) -> BTreeMap<String, String> {
        self.dump()
            .lines()
            .filter(|l| !l.starts_with('#') && !l.trim().is_empty())
            .filter_map(|l| l.split_once('='))
            .map(|(k, v)| (k.to_string(), v.to_string()))
            .collect()
    }
}

fn fmt_f(v: f64) -> String {
    // shed conversion noise so dumped files stay readable
    let r = (v * 1e9).round() / 1e9;
    if r == r.trunc() && r.abs() < 1e15 {
        format!("{r:.1}")
    } else {
        format!("{r}")
    }
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            map: MapConfig::default(),
            filter: FilterParams::default(),
            estimator: EstimatorParams::default(),
            resolutions: vec![0.1, 0.2, 0.3],
            ball_radius: 0.5,
            sigma_gt: 0.1,
            prediction_noise: false,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn map_size_rounds_up_to_voxel_multiples() {
        let cfg = MapConfig {
            map_size: [9.9, 10.0, 5.95],
            ..MapConfig::default()
        }
        .normalize()
        .unwrap();
        assert_eq!(cfg.voxel_dims(), [50, 50, 30]);
        assert!((cfg.map_size[0] - 10.0).abs() < 1e-12);
        assert_eq!(cfg.n_voxels(), 75_000);
    }

    #[test]
    fn pyramid_angle_must_divide_pi() {
        let bad = MapConfig {
            pyramid_angle: 3.3_f64.to_radians(),
            ..MapConfig::default()
        };
        assert!(bad.normalize().is_err());
    }

    #[test]
    fn config_roundtrip_through_dump() {
        let cfg = RunConfig::desk_profile().normalize().unwrap();
        let text = cfg.dump();
        let back = RunConfig::parse(&text).unwrap();
        assert_eq!(back.map.map_size, cfg.map.map_size);
        assert_eq!(back.filter.l_max, cfg.filter.l_max);
        assert_eq!(back.filter.mode, cfg.filter.mode);
        assert_eq!(back.resolutions, cfg.resolutions);
    }

    #[test]
    fn unknown_key_is_rejected_with_name() {
        let mut cfg = RunConfig::default();
        let err = cfg.set("no_such_key", "1").unwrap_err();
        assert!(err.to_string().contains("no_such_key"));
    }

    #[test]
    fn parse_reports_line_numbers() {
        let err = RunConfig::parse("p_d=0.9\nthis is junk\n").unwrap_err();
        assert!(err.to_string().contains("line 2"), "{err}");
    }
}
