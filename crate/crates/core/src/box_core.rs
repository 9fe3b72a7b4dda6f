//! Continuous and quantized box parameterizations.
//!
//! A box is nine numbers: dimensions, center and intrinsic Z-Y-X Euler
//! angles (yaw, pitch, roll). [`Normalizer`] maps metric parameters into
//! unit ranges and [`Quantizer`] maps those onto a fixed number of bins per
//! parameter. [`enumerate_equivalent_params`] lists every parameter tuple
//! that describes the same physical box under a [`SymmetryMode`].

use std::f64::consts::{FRAC_PI_2, PI};

use nalgebra::{Matrix3, Rotation3, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Number of box parameters.
pub const NUM_PARAMS: usize = 9;

/// Lower floor on every normalizer scale, in meters.
pub const EPS_SCALE: f64 = 1e-3;

/// Parameter positions inside a 9-tuple.
pub mod param {
    pub const DX: usize = 0;
    pub const DY: usize = 1;
    pub const DZ: usize = 2;
    pub const CX: usize = 3;
    pub const CY: usize = 4;
    pub const CZ: usize = 5;
    pub const YAW: usize = 6;
    pub const PITCH: usize = 7;
    pub const ROLL: usize = 8;

    pub const NAMES: [&str; 9] = ["dx", "dy", "dz", "cx", "cy", "cz", "yaw", "pitch", "roll"];
}

/// Wraps an angle into `[-pi, pi)`.
pub fn wrap_angle(a: f64) -> f64 {
    let mut w = (a + PI).rem_euclid(2.0 * PI) - PI;
    if w >= PI {
        w -= 2.0 * PI;
    }
    w
}

/// An oriented box in meters and radians.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoxParams {
    pub dims: [f64; 3],
    pub center: [f64; 3],
    /// Intrinsic Z-Y-X angles: `[yaw, pitch, roll]`.
    pub euler_zyx: [f64; 3],
}

impl BoxParams {
    pub fn new(dims: [f64; 3], center: [f64; 3], euler_zyx: [f64; 3]) -> Self {
        Self {
            dims,
            center,
            euler_zyx,
        }
    }

    pub fn axis_aligned(dims: [f64; 3], center: [f64; 3]) -> Self {
        Self::new(dims, center, [0.0; 3])
    }

    pub fn with_yaw(dims: [f64; 3], center: [f64; 3], yaw: f64) -> Self {
        Self::new(dims, center, [yaw, 0.0, 0.0])
    }

    /// Checks finiteness and strictly positive dimensions.
    pub fn validate(&self) -> Result<()> {
        let all = self.dims.iter().chain(&self.center).chain(&self.euler_zyx);
        if all.into_iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("box parameters"));
        }
        if self.dims.iter().any(|&d| d <= 0.0) {
            return Err(Error::InvalidBox(format!(
                "dimensions must be positive, got {:?}",
                self.dims
            )));
        }
        Ok(())
    }

    /// `Rz(yaw) * Ry(pitch) * Rx(roll)`.
    pub fn rotation(&self) -> Rotation3<f64> {
        let [yaw, pitch, roll] = self.euler_zyx;
        Rotation3::from_euler_angles(roll, pitch, yaw)
    }

    pub fn quaternion(&self) -> Quaternion {
        Quaternion::from_euler_zyx(self.euler_zyx)
    }

    pub fn center_vec(&self) -> Vector3<f64> {
        Vector3::from(self.center)
    }

    pub fn volume(&self) -> f64 {
        self.dims.iter().product()
    }

    /// True when any dimension is below `1e-9`.
    pub fn is_degenerate(&self) -> bool {
        self.dims.iter().any(|&d| d < 1e-9)
    }

    /// The eight corners `center + R * (+-d/2)`. Bit `k` of the corner index
    /// selects the sign along local axis `k`.
    pub fn corners(&self) -> [Vector3<f64>; 8] {
        let r = self.rotation();
        let c = self.center_vec();
        let h = Vector3::from(self.dims) * 0.5;
        std::array::from_fn(|i| {
            let s = |k: usize| if i >> k & 1 == 1 { 1.0 } else { -1.0 };
            c + r * Vector3::new(s(0) * h.x, s(1) * h.y, s(2) * h.z)
        })
    }

    /// Same box with angles brought into their canonical ranges.
    pub fn canonical(&self, mode: SymmetryMode) -> Self {
        let euler_zyx = match mode {
            SymmetryMode::Yaw => [wrap_angle(self.euler_zyx[0]), 0.0, 0.0],
            _ => euler_zyx_from_matrix(self.rotation().matrix()),
        };
        Self { euler_zyx, ..*self }
    }

    pub fn to_array(&self) -> [f64; NUM_PARAMS] {
        let mut out = [0.0; NUM_PARAMS];
        out[0..3].copy_from_slice(&self.dims);
        out[3..6].copy_from_slice(&self.center);
        out[6..9].copy_from_slice(&self.euler_zyx);
        out
    }

    pub fn from_array(v: [f64; NUM_PARAMS]) -> Self {
        Self::new([v[0], v[1], v[2]], [v[3], v[4], v[5]], [v[6], v[7], v[8]])
    }
}

/// Decomposes a rotation matrix into canonical `[yaw, pitch, roll]`.
///
/// At gimbal lock (`|pitch| = pi/2`) roll is set to zero.
pub fn euler_zyx_from_matrix(m: &Matrix3<f64>) -> [f64; 3] {
    let s = (-m[(2, 0)]).clamp(-1.0, 1.0);
    let pitch = s.asin();
    let (yaw, roll) = if m[(2, 0)].abs() < 1.0 - 1e-12 {
        (m[(1, 0)].atan2(m[(0, 0)]), m[(2, 1)].atan2(m[(2, 2)]))
    } else {
        ((-m[(0, 1)]).atan2(m[(1, 1)]), 0.0)
    };
    [wrap_angle(yaw), pitch, wrap_angle(roll)]
}

/// Unit quaternion kept on the `w >= 0` hemisphere.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Quaternion {
    pub w: f64,
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Quaternion {
    pub const IDENTITY: Self = Self {
        w: 1.0,
        x: 0.0,
        y: 0.0,
        z: 0.0,
    };

    /// Normalizes and flips onto the `w >= 0` hemisphere.
    pub fn new(w: f64, x: f64, y: f64, z: f64) -> Self {
        let n = (w * w + x * x + y * y + z * z).sqrt();
        let s = if w < 0.0 { -1.0 / n } else { 1.0 / n };
        Self {
            w: w * s,
            x: x * s,
            y: y * s,
            z: z * s,
        }
    }

    pub fn from_euler_zyx(euler: [f64; 3]) -> Self {
        let [yaw, pitch, roll] = euler;
        let q = UnitQuaternion::from_euler_angles(roll, pitch, yaw);
        Self::new(q.w, q.i, q.j, q.k)
    }

    pub fn from_matrix(m: &Matrix3<f64>) -> Self {
        let q = UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(*m));
        Self::new(q.w, q.i, q.j, q.k)
    }

    pub fn to_euler_zyx(&self) -> [f64; 3] {
        euler_zyx_from_matrix(self.to_unit().to_rotation_matrix().matrix())
    }

    pub fn to_unit(&self) -> UnitQuaternion<f64> {
        UnitQuaternion::from_quaternion(nalgebra::Quaternion::new(self.w, self.x, self.y, self.z))
    }

    pub fn dot(&self, o: &Self) -> f64 {
        self.w * o.w + self.x * o.x + self.y * o.y + self.z * o.z
    }

    pub fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }
}

/// Which relabelings of a box's parameters count as the same box.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SymmetryMode {
    /// Full rotations, no equivalences.
    None,
    /// One rotational degree of freedom about z; pitch and roll are zero.
    Yaw,
    /// Full rotations modulo the 24 proper axis relabelings.
    FullSo3,
}

/// Rotations `g` such that `(R g, |g^T| d)` describes the same box as `(R, d)`.
/// The identity always comes first.
pub fn symmetry_group(mode: SymmetryMode) -> Vec<Matrix3<f64>> {
    match mode {
        SymmetryMode::None => vec![Matrix3::identity()],
        SymmetryMode::Yaw => [0.0, PI, FRAC_PI_2, -FRAC_PI_2]
            .iter()
            .map(|&a| yaw_matrix_exact(a))
            .collect(),
        SymmetryMode::FullSo3 => chiral_octahedral_group(),
    }
}

fn yaw_matrix_exact(a: f64) -> Matrix3<f64> {
    let (s, c) = (a.sin().round(), a.cos().round());
    Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0)
}

fn chiral_octahedral_group() -> Vec<Matrix3<f64>> {
    const PERMS: [[usize; 3]; 6] = [
        [0, 1, 2],
        [0, 2, 1],
        [1, 0, 2],
        [1, 2, 0],
        [2, 0, 1],
        [2, 1, 0],
    ];
    let mut out = Vec::with_capacity(24);
    for perm in PERMS {
        for signs in 0..8u32 {
            let mut m = Matrix3::zeros();
            for (row, &col) in perm.iter().enumerate() {
                m[(row, col)] = if signs >> row & 1 == 1 { -1.0 } else { 1.0 };
            }
            if m.determinant() > 0.0 {
                out.push(m);
            }
        }
    }
    out
}

/// Every parameter tuple describing the same physical box as `b`.
///
/// `FullSo3` yields 24 tuples, `Yaw` yields 4 (`theta`, `theta + pi`, and the
/// `dx`/`dy` swap at `theta +- pi/2`), `None` yields `b` itself. Duplicates
/// are removed by exact equality after canonicalization.
pub fn enumerate_equivalent_params(b: &BoxParams, mode: SymmetryMode) -> Vec<BoxParams> {
    let base = b.canonical(mode);
    let r = base.rotation();
    let d = Vector3::from(base.dims);
    let mut out: Vec<BoxParams> = Vec::new();
    for g in symmetry_group(mode) {
        let dims = g.transpose().abs() * d;
        let euler_zyx = match mode {
            SymmetryMode::Yaw => {
                let turn = g[(1, 0)].atan2(g[(0, 0)]);
                [wrap_angle(base.euler_zyx[0] + turn), 0.0, 0.0]
            }
            _ => euler_zyx_from_matrix(&(r.matrix() * g)),
        };
        let cand = BoxParams::new(dims.into(), base.center, euler_zyx);
        if !out.contains(&cand) {
            out.push(cand);
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormalizerMode {
    Quartile,
    ScalarMax,
    Fixed,
}

/// Affine map between metric box parameters and normalized units:
/// dims become `d / scale`, centers `(c - offset) / scale`. Angles pass
/// through unchanged.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub scale: [f64; 3],
    pub offset: [f64; 3],
    pub mode: NormalizerMode,
}

impl Normalizer {
    pub fn fixed(scale: [f64; 3], offset: [f64; 3]) -> Result<Self> {
        let n = Self {
            scale,
            offset,
            mode: NormalizerMode::Fixed,
        };
        n.validate()?;
        Ok(n)
    }

    /// Isotropic scale `max(d)` taken from a pointwise dimension estimate.
    pub fn scalar_max(dims: [f64; 3], offset: [f64; 3]) -> Self {
        let s = dims.iter().cloned().fold(EPS_SCALE, f64::max);
        Self {
            scale: [s; 3],
            offset,
            mode: NormalizerMode::ScalarMax,
        }
    }

    pub fn identity() -> Self {
        Self {
            scale: [1.0; 3],
            offset: [0.0; 3],
            mode: NormalizerMode::Fixed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.scale.iter().chain(&self.offset).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("normalizer"));
        }
        if self.scale.iter().any(|&s| s < EPS_SCALE) {
            return Err(Error::InvalidNormalizer(format!(
                "scale {:?} below floor {EPS_SCALE}",
                self.scale
            )));
        }
        Ok(())
    }

    pub fn normalize_point(&self, p: [f64; 3]) -> [f64; 3] {
        std::array::from_fn(|i| (p[i] - self.offset[i]) / self.scale[i])
    }

    pub fn denormalize_point(&self, p: [f64; 3]) -> [f64; 3] {
        std::array::from_fn(|i| p[i] * self.scale[i] + self.offset[i])
    }

    pub fn normalize_dims(&self, d: [f64; 3]) -> [f64; 3] {
        std::array::from_fn(|i| d[i] / self.scale[i])
    }

    pub fn denormalize_dims(&self, d: [f64; 3]) -> [f64; 3] {
        std::array::from_fn(|i| d[i] * self.scale[i])
    }

    pub fn normalize_box(&self, b: &BoxParams) -> [f64; NUM_PARAMS] {
        let mut v = [0.0; NUM_PARAMS];
        v[0..3].copy_from_slice(&self.normalize_dims(b.dims));
        v[3..6].copy_from_slice(&self.normalize_point(b.center));
        v[6..9].copy_from_slice(&b.euler_zyx);
        v
    }

    pub fn denormalize_box(&self, v: &[f64; NUM_PARAMS]) -> BoxParams {
        BoxParams::new(
            self.denormalize_dims([v[0], v[1], v[2]]),
            self.denormalize_point([v[3], v[4], v[5]]),
            [v[6], v[7], v[8]],
        )
    }
}

/// Linear-interpolation quantile of sorted data (the common "type 7" rule).
pub(crate) fn sorted_quantile(sorted: &[f64], p: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Quartile normalizer of a point cloud: per axis, `scale = max(Q3 - Q1,
/// EPS_SCALE)` and `offset = (Q1 + Q3) / 2`.
pub fn normalize_cloud(points: &[[f64; 3]]) -> Result<Normalizer> {
    if points.is_empty() {
        return Err(Error::EmptyPointSet);
    }
    if points.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("point cloud"));
    }
    let mut scale = [0.0; 3];
    let mut offset = [0.0; 3];
    let mut axis = Vec::with_capacity(points.len());
    for a in 0..3 {
        axis.clear();
        axis.extend(points.iter().map(|p| p[a]));
        axis.sort_by(f64::total_cmp);
        let q1 = sorted_quantile(&axis, 0.25);
        let q3 = sorted_quantile(&axis, 0.75);
        scale[a] = (q3 - q1).max(EPS_SCALE);
        offset[a] = 0.5 * (q1 + q3);
    }
    Ok(Normalizer {
        scale,
        offset,
        mode: NormalizerMode::Quartile,
    })
}

/// Uniform binning of each normalized parameter over `[lo, hi]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Quantizer {
    pub bins: u32,
    pub ranges: [[f64; 2]; NUM_PARAMS],
}

impl Default for Quantizer {
    fn default() -> Self {
        Self::with_bins(512)
    }
}

impl Quantizer {
    /// Default ranges: dims `[0, 1]`, centers `[-1, 1]`, yaw and roll
    /// `[-pi, pi]`, pitch `[-pi/2, pi/2]`.
    pub fn with_bins(bins: u32) -> Self {
        Self {
            bins,
            ranges: [
                [0.0, 1.0],
                [0.0, 1.0],
                [0.0, 1.0],
                [-1.0, 1.0],
                [-1.0, 1.0],
                [-1.0, 1.0],
                [-PI, PI],
                [-FRAC_PI_2, FRAC_PI_2],
                [-PI, PI],
            ],
        }
    }

    pub fn new(bins: u32, ranges: [[f64; 2]; NUM_PARAMS]) -> Result<Self> {
        let q = Self { bins, ranges };
        q.validate()?;
        Ok(q)
    }

    pub fn validate(&self) -> Result<()> {
        if self.bins < 2 {
            return Err(Error::InvalidQuantizer(format!(
                "need at least 2 bins, got {}",
                self.bins
            )));
        }
        for (i, [lo, hi]) in self.ranges.iter().enumerate() {
            if !(lo.is_finite() && hi.is_finite() && lo < hi) {
                return Err(Error::InvalidQuantizer(format!(
                    "range of {} is [{lo}, {hi}]",
                    param::NAMES[i]
                )));
            }
        }
        Ok(())
    }

    /// Dimension and center ranges spanning the `[tail, 1 - tail]` quantiles
    /// of normalized sample boxes; angle ranges keep their defaults.
    pub fn calibrated(bins: u32, samples: &[[f64; NUM_PARAMS]], tail: f64) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::EmptyDataset);
        }
        if !(0.0..0.5).contains(&tail) {
            return Err(Error::InvalidQuantizer(format!("tail {tail} outside [0, 0.5)")));
        }
        if samples.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("calibration boxes"));
        }
        let mut q = Self::with_bins(bins);
        let mut column = Vec::with_capacity(samples.len());
        for p in 0..6 {
            column.clear();
            column.extend(samples.iter().map(|s| s[p]));
            column.sort_by(f64::total_cmp);
            let lo = sorted_quantile(&column, tail);
            let hi = sorted_quantile(&column, 1.0 - tail);
            let pad = (hi - lo).max(EPS_SCALE) * 1e-3;
            q.ranges[p] = [lo - pad, hi + pad];
        }
        q.validate()?;
        Ok(q)
    }

    pub fn bin_width(&self, param: usize) -> f64 {
        let [lo, hi] = self.ranges[param];
        (hi - lo) / self.bins as f64
    }

    /// Bin index of `v` and whether it fell outside the range.
    pub fn bin_of(&self, param: usize, v: f64) -> (u32, bool) {
        let [lo, hi] = self.ranges[param];
        let overflow = !(lo..=hi).contains(&v);
        let raw = ((v - lo) / (hi - lo) * self.bins as f64).floor();
        let idx = raw.clamp(0.0, (self.bins - 1) as f64) as u32;
        (idx, overflow)
    }

    pub fn bin_center(&self, param: usize, index: u32) -> f64 {
        let [lo, hi] = self.ranges[param];
        (index as f64 + 0.5) / self.bins as f64 * (hi - lo) + lo
    }
}

/// Nine bin indices plus per-parameter overflow flags.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct QuantizedBox {
    pub indices: [u32; NUM_PARAMS],
    #[serde(default)]
    pub overflow: [bool; NUM_PARAMS],
}

impl QuantizedBox {
    pub fn from_indices(indices: [u32; NUM_PARAMS]) -> Self {
        Self {
            indices,
            overflow: [false; NUM_PARAMS],
        }
    }

    pub fn any_overflow(&self) -> bool {
        self.overflow.iter().any(|&o| o)
    }
}

pub fn quantize_box(
    b: &BoxParams,
    n: &Normalizer,
    q: &Quantizer,
    mode: SymmetryMode,
) -> QuantizedBox {
    let canon = b.canonical(mode);
    let v = n.normalize_box(&canon);
    let mut out = QuantizedBox::from_indices([0; NUM_PARAMS]);
    for (i, &x) in v.iter().enumerate() {
        let (idx, of) = q.bin_of(i, x);
        out.indices[i] = idx;
        out.overflow[i] = of;
    }
    out
}

/// Normalized bin-center values of a quantized box.
pub fn bin_centers(qb: &QuantizedBox, q: &Quantizer) -> Result<[f64; NUM_PARAMS]> {
    let mut v = [0.0; NUM_PARAMS];
    for (i, &idx) in qb.indices.iter().enumerate() {
        if idx >= q.bins {
            return Err(Error::IndexOutOfRange {
                param: i,
                index: idx,
                bins: q.bins,
            });
        }
        v[i] = q.bin_center(i, idx);
    }
    Ok(v)
}

pub fn dequantize_box(
    qb: &QuantizedBox,
    n: &Normalizer,
    q: &Quantizer,
    mode: SymmetryMode,
) -> Result<BoxParams> {
    let mut v = bin_centers(qb, q)?;
    if mode == SymmetryMode::Yaw {
        v[param::PITCH] = 0.0;
        v[param::ROLL] = 0.0;
    }
    Ok(n.denormalize_box(&v))
}

/// Normalizer, quantizer and symmetry mode bundled: the full encoding of
/// boxes into the discrete sample space of a distribution.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoxCodec {
    pub normalizer: Normalizer,
    pub quantizer: Quantizer,
    pub symmetry: SymmetryMode,
}

impl BoxCodec {
    pub fn new(normalizer: Normalizer, quantizer: Quantizer, symmetry: SymmetryMode) -> Self {
        Self {
            normalizer,
            quantizer,
            symmetry,
        }
    }

    pub fn bins(&self) -> u32 {
        self.quantizer.bins
    }

    pub fn quantize(&self, b: &BoxParams) -> QuantizedBox {
        quantize_box(b, &self.normalizer, &self.quantizer, self.symmetry)
    }

    pub fn dequantize(&self, qb: &QuantizedBox) -> Result<BoxParams> {
        dequantize_box(qb, &self.normalizer, &self.quantizer, self.symmetry)
    }

    /// Bins of metric dimensions, with overflow flags.
    pub fn quantize_dims(&self, dims: [f64; 3]) -> ([u32; 3], [bool; 3]) {
        let nd = self.normalizer.normalize_dims(dims);
        let mut idx = [0; 3];
        let mut of = [false; 3];
        for a in 0..3 {
            (idx[a], of[a]) = self.quantizer.bin_of(a, nd[a]);
        }
        (idx, of)
    }

    /// Builds a box from normalized parameter values (bin centers or
    /// conditional means).
    pub fn decode_normalized(&self, v: &[f64; NUM_PARAMS]) -> BoxParams {
        let mut v = *v;
        if self.symmetry == SymmetryMode::Yaw {
            v[param::PITCH] = 0.0;
            v[param::ROLL] = 0.0;
        }
        self.normalizer.denormalize_box(&v)
    }
}
