//! Context descriptors to safety parameters and region barriers.
//!
//! The encoder is a fixed feature map followed by two linear heads under
//! softplus, so `α` and `κ` are strictly positive for any finite input.
//! Region barriers are signed distances (positive outside) minus a
//! severity-dependent margin.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::barriers::{Barrier, BarrierRole, BarrierShape, CompositeBarrier};
use crate::safety_qp::SlackPolicy;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SemanticError {
    #[error("invalid region geometry: {0}")]
    Geometry(String),
    #[error("{field} = {value} outside [0, 1]")]
    Unit { field: &'static str, value: f64 },
    #[error("encoder weights: {0}")]
    Weights(String),
    #[error("arbitration needs at least one hard barrier")]
    NoHardBarrier,
    #[error(transparent)]
    Barrier(#[from] crate::barriers::BarrierError),
}

/// Planar region geometry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "shape", rename_all = "snake_case", deny_unknown_fields)]
pub enum RegionShape {
    Circle { center: [f64; 2], radius: f64 },
    Polygon { vertices: Vec<[f64; 2]> },
}

impl RegionShape {
    pub fn validate(&self) -> Result<(), SemanticError> {
        match self {
            RegionShape::Circle { center, radius } => {
                if !(*radius > 0.0) || !radius.is_finite() || center.iter().any(|c| !c.is_finite()) {
                    return Err(SemanticError::Geometry(format!("circle radius must be positive and finite, got {radius}")));
                }
            }
            RegionShape::Polygon { vertices } => {
                if vertices.len() < 3 {
                    return Err(SemanticError::Geometry("polygon needs at least three vertices".into()));
                }
                if vertices.iter().flatten().any(|c| !c.is_finite()) {
                    return Err(SemanticError::Geometry("polygon vertex is not finite".into()));
                }
                if signed_area(vertices).abs() < 1e-12 {
                    return Err(SemanticError::Geometry("polygon has zero area".into()));
                }
                let m = vertices.len();
                for i in 0..m {
                    for j in (i + 1)..m {
                        let adjacent = j == i + 1 || (i == 0 && j == m - 1);
                        if adjacent {
                            continue;
                        }
                        let (a, b) = (vertices[i], vertices[(i + 1) % m]);
                        let (c, d) = (vertices[j], vertices[(j + 1) % m]);
                        if segments_intersect(a, b, c, d) {
                            return Err(SemanticError::Geometry(format!("polygon edges {i} and {j} intersect")));
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

fn signed_area(v: &[[f64; 2]]) -> f64 {
    let m = v.len();
    (0..m).map(|i| {
        let (a, b) = (v[i], v[(i + 1) % m]);
        a[0] * b[1] - b[0] * a[1]
    }).sum::<f64>() * 0.5
}

fn cross(o: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])
}

fn on_segment(a: [f64; 2], b: [f64; 2], p: [f64; 2]) -> bool {
    p[0] >= a[0].min(b[0]) && p[0] <= a[0].max(b[0]) && p[1] >= a[1].min(b[1]) && p[1] <= a[1].max(b[1])
}

fn segments_intersect(a: [f64; 2], b: [f64; 2], c: [f64; 2], d: [f64; 2]) -> bool {
    let d1 = cross(c, d, a);
    let d2 = cross(c, d, b);
    let d3 = cross(a, b, c);
    let d4 = cross(a, b, d);
    if ((d1 > 0.0 && d2 < 0.0) || (d1 < 0.0 && d2 > 0.0)) && ((d3 > 0.0 && d4 < 0.0) || (d3 < 0.0 && d4 > 0.0)) {
        return true;
    }
    (d1 == 0.0 && on_segment(c, d, a))
        || (d2 == 0.0 && on_segment(c, d, b))
        || (d3 == 0.0 && on_segment(a, b, c))
        || (d4 == 0.0 && on_segment(a, b, d))
}

fn point_in_polygon(v: &[[f64; 2]], p: [f64; 2]) -> bool {
    let m = v.len();
    let mut inside = false;
    let mut j = m - 1;
    for i in 0..m {
        let (a, b) = (v[i], v[j]);
        if (a[1] > p[1]) != (b[1] > p[1]) {
            let x = (b[0] - a[0]) * (p[1] - a[1]) / (b[1] - a[1]) + a[0];
            if p[0] < x {
                inside = !inside;
            }
        }
        j = i;
    }
    inside
}

/// Signed distance with its planar gradient and Hessian.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SignedDistance {
    pub distance: f64,
    pub grad: [f64; 2],
    pub hess: [[f64; 2]; 2],
}

fn curvature(n: [f64; 2], r: f64, sign: f64) -> [[f64; 2]; 2] {
    let k = sign / r;
    [[k * (1.0 - n[0] * n[0]), -k * n[0] * n[1]], [-k * n[0] * n[1], k * (1.0 - n[1] * n[1])]]
}

/// Signed distance from `p` to the region boundary, positive outside.
pub fn signed_distance(shape: &RegionShape, p: [f64; 2]) -> SignedDistance {
    match shape {
        RegionShape::Circle { center, radius } => {
            let v = [p[0] - center[0], p[1] - center[1]];
            let r = v[0].hypot(v[1]);
            if r == 0.0 {
                return SignedDistance { distance: -radius, grad: [1.0, 0.0], hess: [[0.0; 2]; 2] };
            }
            let n = [v[0] / r, v[1] / r];
            SignedDistance { distance: r - radius, grad: n, hess: curvature(n, r, 1.0) }
        }
        RegionShape::Polygon { vertices } => polygon_distance(vertices, p),
    }
}

fn polygon_distance(v: &[[f64; 2]], p: [f64; 2]) -> SignedDistance {
    let m = v.len();
    let orientation = signed_area(v).signum();
    let mut best = (f64::INFINITY, 0usize, 0.0f64, [0.0; 2]);
    for i in 0..m {
        let (a, b) = (v[i], v[(i + 1) % m]);
        let e = [b[0] - a[0], b[1] - a[1]];
        let len2 = e[0] * e[0] + e[1] * e[1];
        let t = (((p[0] - a[0]) * e[0] + (p[1] - a[1]) * e[1]) / len2).clamp(0.0, 1.0);
        let q = [a[0] + t * e[0], a[1] + t * e[1]];
        let d = (p[0] - q[0]).hypot(p[1] - q[1]);
        if d < best.0 {
            best = (d, i, t, q);
        }
    }
    let (dist, edge, t, q) = best;
    let sign = if point_in_polygon(v, p) { -1.0 } else { 1.0 };
    let (a, b) = (v[edge], v[(edge + 1) % m]);
    let e = [b[0] - a[0], b[1] - a[1]];
    let len = e[0].hypot(e[1]);
    // Outward facet normal: right-hand normal for counter-clockwise polygons.
    let normal = [orientation * e[1] / len, -orientation * e[0] / len];
    let at_vertex = t == 0.0 || t == 1.0;
    if !at_vertex || dist == 0.0 {
        return SignedDistance { distance: sign * dist, grad: normal, hess: [[0.0; 2]; 2] };
    }
    let n = [sign * (p[0] - q[0]) / dist, sign * (p[1] - q[1]) / dist];
    SignedDistance { distance: sign * dist, grad: n, hess: curvature([n[0], n[1]], dist, sign) }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TerrainClass {
    #[default]
    Flat,
    Rough,
    Slippery,
    Stairs,
    Deformable,
}

impl TerrainClass {
    pub const ALL: [TerrainClass; 5] =
        [TerrainClass::Flat, TerrainClass::Rough, TerrainClass::Slippery, TerrainClass::Stairs, TerrainClass::Deformable];
}

fn unit() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HazardRegion {
    pub region: RegionShape,
    #[serde(default)]
    pub severity: f64,
    #[serde(default = "unit")]
    pub confidence: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Directive {
    /// Stay outside the region; `hard` promotes it to a physical-priority barrier.
    KeepOut {
        region: RegionShape,
        #[serde(default)]
        severity: f64,
        #[serde(default = "unit")]
        confidence: f64,
        #[serde(default)]
        hard: bool,
    },
    /// Keep at least `distance` from a point.
    KeepDistance {
        center: [f64; 2],
        distance: f64,
        #[serde(default = "unit")]
        confidence: f64,
    },
    /// Speed cap while the position lies inside the region.
    SlowZone {
        region: RegionShape,
        max_speed: f64,
        #[serde(default = "unit")]
        confidence: f64,
    },
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ContextDescriptor {
    #[serde(default)]
    pub hazard_regions: Vec<HazardRegion>,
    #[serde(default)]
    pub terrain: TerrainClass,
    #[serde(default)]
    pub directives: Vec<Directive>,
}

fn check_unit(field: &'static str, value: f64) -> Result<(), SemanticError> {
    if (0.0..=1.0).contains(&value) {
        Ok(())
    } else {
        Err(SemanticError::Unit { field, value })
    }
}

impl ContextDescriptor {
    pub fn validate(&self) -> Result<(), SemanticError> {
        for h in &self.hazard_regions {
            h.region.validate()?;
            check_unit("severity", h.severity)?;
            check_unit("confidence", h.confidence)?;
        }
        for d in &self.directives {
            match d {
                Directive::KeepOut { region, severity, confidence, .. } => {
                    region.validate()?;
                    check_unit("severity", *severity)?;
                    check_unit("confidence", *confidence)?;
                }
                Directive::KeepDistance { center, distance, confidence } => {
                    RegionShape::Circle { center: *center, radius: *distance }.validate()?;
                    check_unit("confidence", *confidence)?;
                }
                Directive::SlowZone { region, max_speed, confidence } => {
                    region.validate()?;
                    if !(*max_speed > 0.0) {
                        return Err(SemanticError::Geometry(format!("slow zone speed must be positive, got {max_speed}")));
                    }
                    check_unit("confidence", *confidence)?;
                }
            }
        }
        Ok(())
    }

    /// Fixed feature map: `[max severity, mean confidence, terrain one-hot…]`.
    pub fn features(&self) -> Vec<f64> {
        let mut sev: Vec<f64> = self.hazard_regions.iter().map(|h| h.severity).collect();
        let mut conf: Vec<f64> = self.hazard_regions.iter().map(|h| h.confidence).collect();
        for d in &self.directives {
            match d {
                Directive::KeepOut { severity, confidence, .. } => {
                    sev.push(*severity);
                    conf.push(*confidence);
                }
                Directive::KeepDistance { confidence, .. } | Directive::SlowZone { confidence, .. } => conf.push(*confidence),
            }
        }
        let max_sev = sev.iter().copied().fold(0.0, f64::max);
        let mean_conf = if conf.is_empty() { 1.0 } else { conf.iter().sum::<f64>() / conf.len() as f64 };
        let mut f = vec![max_sev, mean_conf];
        f.extend(TerrainClass::ALL.iter().map(|&c| if c == self.terrain { 1.0 } else { 0.0 }));
        f
    }
}

pub const FEATURE_DIM: usize = 2 + TerrainClass::ALL.len();

/// Linear heads of the encoder (`θ_s`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderWeights {
    pub alpha_weights: Vec<f64>,
    pub alpha_bias: f64,
    pub kappa_weights: Vec<f64>,
    pub kappa_bias: f64,
    pub margin_base: f64,
    pub margin_severity: f64,
}

impl Default for EncoderWeights {
    fn default() -> Self {
        Self {
            // Order: severity, confidence, flat, rough, slippery, stairs, deformable.
            alpha_weights: vec![-0.3, 0.0, 0.0, -0.2, -0.4, -0.2, -0.3],
            alpha_bias: 0.5413,
            kappa_weights: vec![1.5, -0.5, 0.0, 0.5, 1.0, 0.5, 0.8],
            kappa_bias: 0.5,
            margin_base: 0.1,
            margin_severity: 0.3,
        }
    }
}

impl EncoderWeights {
    pub fn validate(&self) -> Result<(), SemanticError> {
        if self.alpha_weights.len() != FEATURE_DIM || self.kappa_weights.len() != FEATURE_DIM {
            return Err(SemanticError::Weights(format!("heads need {FEATURE_DIM} weights each")));
        }
        if !(self.margin_base >= 0.0 && self.margin_severity >= 0.0) {
            return Err(SemanticError::Weights("margin coefficients must be non-negative".into()));
        }
        Ok(())
    }
}

/// `log(1 + eˣ)` without overflow.
pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x + (-x).exp()
    } else {
        x.exp().ln_1p()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SemanticOutput {
    pub region_barriers: Vec<Barrier>,
    pub alpha: f64,
    pub kappa: f64,
    pub margins: Vec<f64>,
}

/// Severity-scaled margin `r = r_base + r_sev · severity`.
pub fn severity_margin(weights: &EncoderWeights, severity: f64) -> f64 {
    weights.margin_base + weights.margin_severity * severity
}

pub fn region_barrier(id: impl Into<String>, region: RegionShape, margin: f64, indices: &[usize], role: BarrierRole, confidence: f64) -> Barrier {
    Barrier {
        id: id.into(),
        role,
        confidence,
        shape: BarrierShape::Region { indices: indices.to_vec(), region, margin },
    }
}

/// Map a context descriptor to `(h_s, α, κ)`.
///
/// `position` are the state indices of the planar position and `velocity`
/// the indices used by slow-zone speed caps; `state` decides whether a slow
/// zone currently contains the position.
pub fn encode_context(
    ctx: &ContextDescriptor,
    weights: &EncoderWeights,
    position: &[usize],
    velocity: &[usize],
    state: Option<&[f64]>,
) -> Result<SemanticOutput, SemanticError> {
    ctx.validate()?;
    weights.validate()?;
    let phi = ctx.features();
    let dot = |w: &[f64]| w.iter().zip(&phi).map(|(a, b)| a * b).sum::<f64>();
    let alpha = softplus(dot(&weights.alpha_weights) + weights.alpha_bias);
    let kappa = softplus(dot(&weights.kappa_weights) + weights.kappa_bias);

    let mut region_barriers = Vec::new();
    let mut margins = Vec::new();
    for (k, hz) in ctx.hazard_regions.iter().enumerate() {
        let r = severity_margin(weights, hz.severity);
        margins.push(r);
        region_barriers.push(region_barrier(format!("hazard{k}"), hz.region.clone(), r, position, BarrierRole::SoftSemantic, hz.confidence));
    }
    for (k, d) in ctx.directives.iter().enumerate() {
        match d {
            Directive::KeepOut { region, severity, confidence, hard } => {
                let r = severity_margin(weights, *severity);
                margins.push(r);
                let role = if *hard { BarrierRole::HardPhysical } else { BarrierRole::SoftSemantic };
                region_barriers.push(region_barrier(format!("keep_out{k}"), region.clone(), r, position, role, *confidence));
            }
            Directive::KeepDistance { center, distance, confidence } => {
                margins.push(0.0);
                let region = RegionShape::Circle { center: *center, radius: *distance };
                region_barriers.push(region_barrier(format!("keep_distance{k}"), region, 0.0, position, BarrierRole::SoftSemantic, *confidence));
            }
            Directive::SlowZone { region, max_speed, confidence } => {
                let inside = state.is_some_and(|x| {
                    let p = [x[position[0]], position.get(1).map_or(0.0, |&j| x[j])];
                    signed_distance(region, p).distance < 0.0
                });
                if inside && !velocity.is_empty() {
                    margins.push(0.0);
                    region_barriers.push(Barrier {
                        id: format!("slow_zone{k}"),
                        role: BarrierRole::SoftSemantic,
                        confidence: *confidence,
                        shape: BarrierShape::SpeedLimit { indices: velocity.to_vec(), max: *max_speed },
                    });
                }
            }
        }
    }
    Ok(SemanticOutput { region_barriers, alpha, kappa, margins })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArbitrationConfig {
    /// Soft barriers below this confidence stay out of the QP.
    #[serde(default = "default_threshold")]
    pub confidence_threshold: f64,
}

fn default_threshold() -> f64 {
    0.3
}

impl Default for ArbitrationConfig {
    fn default() -> Self {
        Self { confidence_threshold: default_threshold() }
    }
}

/// Barrier set ready for the QP with one slack policy per member.
#[derive(Debug, Clone, PartialEq)]
pub struct Arbitration {
    pub composite: CompositeBarrier,
    pub policies: Vec<SlackPolicy>,
    /// Low-confidence soft barriers routed to the meta-loss only.
    pub advisory: Vec<Barrier>,
}

/// Merge hard physical barriers with semantic ones, hard first.
///
/// Hard members get [`SlackPolicy::Hard`]; admitted soft members get a
/// slack weight scaled by their confidence.
pub fn arbitrate(hard: &[Barrier], soft: &[Barrier], beta: f64, cfg: &ArbitrationConfig) -> Result<Arbitration, SemanticError> {
    if !hard.iter().any(Barrier::is_hard) {
        return Err(SemanticError::NoHardBarrier);
    }
    let mut members = Vec::new();
    let mut policies = Vec::new();
    let mut advisory = Vec::new();
    for b in hard.iter().chain(soft.iter().filter(|b| b.is_hard())) {
        members.push(b.clone());
        policies.push(SlackPolicy::Hard);
    }
    for b in hard.iter().chain(soft).filter(|b| !b.is_hard()) {
        if b.confidence < cfg.confidence_threshold {
            advisory.push(b.clone());
        } else {
            members.push(b.clone());
            policies.push(SlackPolicy::Soft { weight_scale: b.confidence });
        }
    }
    Ok(Arbitration { composite: CompositeBarrier::new(members, beta)?, policies, advisory })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::barriers::eval_barrier;
    use nalgebra::DVector;
    use proptest::prelude::*;

    fn square() -> RegionShape {
        RegionShape::Polygon { vertices: vec![[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]] }
    }

    #[test]
    fn softplus_values() {
        assert!((softplus(0.0) - 2f64.ln()).abs() < 1e-15);
        assert!((softplus(20.0) - 20.0).abs() < 1e-8);
        assert!(softplus(-800.0) >= 0.0);
        assert!(softplus(800.0).is_finite());
    }

    #[test]
    fn circle_region_distance() {
        let b = region_barrier("c", RegionShape::Circle { center: [0.0, 0.0], radius: 1.0 }, 0.5, &[0, 1], BarrierRole::SoftSemantic, 1.0);
        let e = eval_barrier(&b, &DVector::from_vec(vec![0.0, 3.0]));
        assert!((e.h - 1.5).abs() < 1e-15);
        assert_eq!(e.grad.as_slice(), &[0.0, 1.0]);
        let on = region_barrier("c", RegionShape::Circle { center: [0.0, 0.0], radius: 1.0 }, 0.0, &[0, 1], BarrierRole::SoftSemantic, 1.0);
        assert_eq!(eval_barrier(&on, &DVector::from_vec(vec![1.0, 0.0])).h, 0.0);
        assert!(eval_barrier(&on, &DVector::from_vec(vec![0.2, 0.1])).h < 0.0);
    }

    #[test]
    fn polygon_distance_regions() {
        let sq = square();
        let d = signed_distance(&sq, [0.5, -2.0]);
        assert_eq!(d.distance, 2.0);
        assert_eq!(d.grad, [0.0, -1.0]);
        assert_eq!(d.hess, [[0.0; 2]; 2]);
        let d = signed_distance(&sq, [0.5, 0.25]);
        assert_eq!(d.distance, -0.25);
        assert_eq!(d.grad, [0.0, -1.0]);
        let d = signed_distance(&sq, [4.0, 5.0]);
        assert!((d.distance - 5.0).abs() < 1e-15);
        assert!((d.grad[0] - 0.6).abs() < 1e-15 && (d.grad[1] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn polygon_vertex_tie_breaks_to_lowest_facet() {
        // Vertex (1, 0) is shared by edge 0 (bottom) and edge 1 (right); edge 0 wins.
        let d = signed_distance(&square(), [1.0, 0.0]);
        assert_eq!(d.distance, 0.0);
        assert_eq!(d.grad, [0.0, -1.0]);
        // Same square listed clockwise keeps outward normals.
        let cw = RegionShape::Polygon { vertices: vec![[0.0, 0.0], [0.0, 1.0], [1.0, 1.0], [1.0, 0.0]] };
        let d = signed_distance(&cw, [0.5, -1.0]);
        assert_eq!(d.grad, [0.0, -1.0]);
    }

    #[test]
    fn geometry_validation() {
        assert!(RegionShape::Circle { center: [0.0, 0.0], radius: 0.0 }.validate().is_err());
        let bowtie = RegionShape::Polygon { vertices: vec![[0.0, 0.0], [1.0, 1.0], [1.0, 0.0], [0.0, 1.0]] };
        assert!(bowtie.validate().is_err());
        assert!(square().validate().is_ok());
        let ctx = ContextDescriptor {
            hazard_regions: vec![HazardRegion { region: square(), severity: 1.5, confidence: 1.0 }],
            ..Default::default()
        };
        assert!(matches!(encode_context(&ctx, &EncoderWeights::default(), &[0, 1], &[], None), Err(SemanticError::Unit { .. })));
    }

    #[test]
    fn kappa_increases_with_severity() {
        let w = EncoderWeights::default();
        let mk = |sev| ContextDescriptor {
            hazard_regions: vec![HazardRegion { region: square(), severity: sev, confidence: 1.0 }],
            ..Default::default()
        };
        let lo = encode_context(&mk(0.0), &w, &[0, 1], &[], None).unwrap();
        let hi = encode_context(&mk(1.0), &w, &[0, 1], &[], None).unwrap();
        assert!(hi.kappa > lo.kappa);
        assert!(hi.margins[0] > lo.margins[0]);
    }

    #[test]
    fn zero_preactivation_gives_ln2() {
        let w = EncoderWeights {
            alpha_weights: vec![0.0; FEATURE_DIM],
            alpha_bias: 0.0,
            kappa_weights: vec![0.0; FEATURE_DIM],
            kappa_bias: 20.0,
            margin_base: 0.0,
            margin_severity: 0.0,
        };
        let out = encode_context(&ContextDescriptor::default(), &w, &[0, 1], &[], None).unwrap();
        assert!((out.alpha - std::f64::consts::LN_2).abs() < 1e-12);
        assert!((out.kappa - 20.0).abs() < 1e-8);
    }

    #[test]
    fn slow_zone_only_inside() {
        let ctx = ContextDescriptor {
            directives: vec![Directive::SlowZone { region: square(), max_speed: 0.2, confidence: 1.0 }],
            ..Default::default()
        };
        let w = EncoderWeights::default();
        let inside = encode_context(&ctx, &w, &[0, 1], &[2, 3], Some(&[0.5, 0.5, 0.0, 0.0])).unwrap();
        assert_eq!(inside.region_barriers.len(), 1);
        let outside = encode_context(&ctx, &w, &[0, 1], &[2, 3], Some(&[5.0, 0.5, 0.0, 0.0])).unwrap();
        assert!(outside.region_barriers.is_empty());
    }

    #[test]
    fn arbitration_threshold_and_policies() {
        let hard = vec![Barrier::hard("floor", BarrierShape::Halfspace { normal: vec![1.0, 0.0], offset: -5.0 })];
        let full = region_barrier("a", square(), 0.1, &[0, 1], BarrierRole::SoftSemantic, 1.0);
        let weak = region_barrier("b", square(), 0.1, &[0, 1], BarrierRole::SoftSemantic, 0.2);
        let arb = arbitrate(&hard, &[full, weak], 10.0, &ArbitrationConfig::default()).unwrap();
        assert_eq!(arb.composite.len(), 2);
        assert_eq!(arb.policies, vec![SlackPolicy::Hard, SlackPolicy::Soft { weight_scale: 1.0 }]);
        assert_eq!(arb.advisory.len(), 1);
        assert_eq!(arb.advisory[0].id, "b");
        assert_eq!(arbitrate(&[], &[], 1.0, &ArbitrationConfig::default()).unwrap_err(), SemanticError::NoHardBarrier);
    }

    proptest! {
        #[test]
        fn encoder_outputs_strictly_positive(sev in 0.0f64..=1.0, conf in 0.0f64..=1.0, scale in -50.0f64..50.0) {
            let mut w = EncoderWeights::default();
            w.alpha_bias *= scale;
            w.kappa_bias = scale;
            let ctx = ContextDescriptor {
                hazard_regions: vec![HazardRegion { region: square(), severity: sev, confidence: conf }],
                terrain: TerrainClass::Slippery,
                directives: vec![],
            };
            let out = encode_context(&ctx, &w, &[0, 1], &[], None).unwrap();
            prop_assert!(out.alpha > 0.0 && out.kappa > 0.0);
            prop_assert!(out.margins.iter().all(|&m| m >= 0.0));
        }

        #[test]
        fn margin_monotone_in_severity(s1 in 0.0f64..=1.0, s2 in 0.0f64..=1.0) {
            let w = EncoderWeights::default();
            let (lo, hi) = if s1 <= s2 { (s1, s2) } else { (s2, s1) };
            prop_assert!(severity_margin(&w, lo) <= severity_margin(&w, hi));
        }

        #[test]
        fn eikonal_outside_regions(x in -5.0f64..6.0, y in -5.0f64..6.0) {
            for shape in [square(), RegionShape::Circle { center: [0.5, 0.5], radius: 0.7 }] {
                let d = signed_distance(&shape, [x, y]);
                if d.distance > 1e-6 {
                    prop_assert!((d.grad[0].hypot(d.grad[1]) - 1.0).abs() < 1e-9);
                }
            }
        }
    }
}
