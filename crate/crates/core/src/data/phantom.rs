//! Piecewise-smooth anatomical phantoms with a simulated low-dose acquisition.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{normalize_hu_value, Dose, PatientVolume, Provenance};
use crate::error::{Error, Result};
use crate::seeded_rng;
use crate::tensor::Tensor;

/// Low-dose noise: `ldct = ndct + sqrt(kappa * ndct) * n1 + sigma_g * n2`, clamped to `[0, 1]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DoseParams {
    /// Strength of the signal-dependent (Poisson-like) component.
    pub kappa: f64,
    /// Standard deviation of the additive Gaussian component.
    pub sigma_g: f64,
}

impl Default for DoseParams {
    fn default() -> Self {
        DoseParams { kappa: 3.0e-3, sigma_g: 0.012 }
    }
}

impl DoseParams {
    pub fn noiseless() -> Self {
        DoseParams { kappa: 0.0, sigma_g: 0.0 }
    }
}

#[derive(Clone, Copy, Debug)]
struct Ellipse {
    cy: f64,
    cx: f64,
    ry: f64,
    rx: f64,
    angle: f64,
    hu: f64,
}

impl Ellipse {
    fn contains(&self, y: f64, x: f64) -> bool {
        let (dy, dx) = (y - self.cy, x - self.cx);
        let (s, c) = self.angle.sin_cos();
        let u = dx * c + dy * s;
        let v = -dx * s + dy * c;
        (u / self.rx).powi(2) + (v / self.ry).powi(2) <= 1.0
    }

    fn scaled(&self, factor: f64) -> Ellipse {
        Ellipse { ry: self.ry * factor, rx: self.rx * factor, ..*self }
    }
}

/// Anatomy drawn once per patient; slices perturb it smoothly along the stack.
struct Anatomy {
    body: Ellipse,
    fat_thickness: f64,
    lungs: [Ellipse; 2],
    lung_extent: f64,
    spine: Ellipse,
    organs: Vec<Ellipse>,
    lesions: Vec<Ellipse>,
    waves: Vec<(f64, f64, f64, f64)>,
    z_phase: f64,
}

fn draw_anatomy<R: Rng>(rng: &mut R, h: f64, w: f64) -> Anatomy {
    let cy = h / 2.0 + rng.gen_range(-0.03..0.03) * h;
    let cx = w / 2.0 + rng.gen_range(-0.03..0.03) * w;
    let body = Ellipse {
        cy,
        cx,
        ry: rng.gen_range(0.30..0.38) * h,
        rx: rng.gen_range(0.40..0.46) * w,
        angle: rng.gen_range(-0.05..0.05),
        hu: 40.0,
    };
    let lung = |side: f64, rng: &mut R| Ellipse {
        cy: cy - 0.05 * h + rng.gen_range(-0.02..0.02) * h,
        cx: cx + side * rng.gen_range(0.17..0.22) * w,
        ry: rng.gen_range(0.15..0.20) * h,
        rx: rng.gen_range(0.10..0.14) * w,
        angle: side * rng.gen_range(0.0..0.3),
        hu: rng.gen_range(-880.0..-780.0),
    };
    let lungs = [lung(-1.0, rng), lung(1.0, rng)];
    let spine = Ellipse {
        cy: cy + body.ry * 0.65,
        cx,
        ry: rng.gen_range(0.05..0.07) * h,
        rx: rng.gen_range(0.05..0.07) * w,
        angle: 0.0,
        hu: rng.gen_range(500.0..800.0),
    };
    let organs = (0..rng.gen_range(2..5))
        .map(|_| Ellipse {
            cy: cy + rng.gen_range(-0.15..0.2) * h,
            cx: cx + rng.gen_range(-0.25..0.25) * w,
            ry: rng.gen_range(0.05..0.12) * h,
            rx: rng.gen_range(0.06..0.14) * w,
            angle: rng.gen_range(0.0..PI),
            hu: rng.gen_range(20.0..90.0),
        })
        .collect();
    let lesions = (0..rng.gen_range(1..4))
        .map(|_| {
            let r = rng.gen_range(0.015..0.035) * h.min(w);
            Ellipse {
                cy: cy + rng.gen_range(-0.2..0.2) * h,
                cx: cx + rng.gen_range(-0.3..0.3) * w,
                ry: r,
                rx: r * rng.gen_range(0.8..1.25),
                angle: 0.0,
                hu: rng.gen_range(-60.0..60.0) + 120.0 * rng.gen_range(0.0..1.0_f64).round(),
            }
        })
        .collect();
    let waves = (0..6)
        .map(|_| {
            (
                rng.gen_range(1.0..6.0) * 2.0 * PI / h,
                rng.gen_range(1.0..6.0) * 2.0 * PI / w,
                rng.gen_range(0.0..2.0 * PI),
                rng.gen_range(3.0..8.0),
            )
        })
        .collect();
    Anatomy {
        body,
        fat_thickness: rng.gen_range(0.06..0.12),
        lungs,
        lung_extent: rng.gen_range(0.4..0.7),
        spine,
        organs,
        lesions,
        waves,
        z_phase: rng.gen_range(0.0..2.0 * PI),
    }
}

fn render_slice(a: &Anatomy, z: f64, h: usize, w: usize) -> Vec<f64> {
    // z in [0, 1): smooth breathing-like modulation of sizes
    let swell = 1.0 + 0.04 * (2.0 * PI * z + a.z_phase).sin();
    let body = a.body.scaled(swell);
    let inner = body.scaled(1.0 - a.fat_thickness);
    let lung_scale = if z < a.lung_extent { (1.0 - z / a.lung_extent).sqrt() } else { 0.0 };
    let organ_scale = 0.85 + 0.3 * z;

    let mut out = Vec::with_capacity(h * w);
    for i in 0..h {
        for j in 0..w {
            let (y, x) = (i as f64 + 0.5, j as f64 + 0.5);
            let hu = if !body.contains(y, x) {
                -1000.0
            } else {
                let mut v = if inner.contains(y, x) { body.hu } else { -100.0 };
                if inner.contains(y, x) {
                    for o in &a.organs {
                        if o.scaled(organ_scale).contains(y, x) {
                            v = o.hu;
                        }
                    }
                    for l in &a.lesions {
                        if l.contains(y, x) {
                            v += l.hu - 40.0;
                        }
                    }
                    if lung_scale > 0.0 {
                        for l in &a.lungs {
                            if l.scaled(lung_scale).contains(y, x) {
                                v = l.hu;
                            }
                        }
                    }
                    if a.spine.contains(y, x) {
                        v = if a.spine.scaled(0.6).contains(y, x) { 250.0 } else { a.spine.hu };
                    }
                    v += a
                        .waves
                        .iter()
                        .map(|&(fy, fx, ph, amp)| amp * (fy * y + fx * x + ph).sin())
                        .sum::<f64>();
                }
                v
            };
            out.push(normalize_hu_value(hu));
        }
    }
    out
}

/// Generates one patient's normal-dose stack and its simulated low-dose counterpart.
///
/// Returns `(low, normal)`; both are pure functions of the arguments.
pub fn generate_phantom_patient(
    patient_id: &str,
    seed: u64,
    n_slices: usize,
    height: usize,
    width: usize,
    dose: DoseParams,
) -> Result<(PatientVolume, PatientVolume)> {
    if height < 32 || width < 32 {
        return Err(Error::invalid(format!("phantom extents must be at least 32, got {height}x{width}")));
    }
    if n_slices == 0 {
        return Err(Error::invalid("phantom needs at least one slice"));
    }
    if dose.kappa < 0.0 || dose.sigma_g < 0.0 {
        return Err(Error::invalid("dose parameters must be non-negative"));
    }
    let mut anatomy_rng = seeded_rng(seed);
    let anatomy = draw_anatomy(&mut anatomy_rng, height as f64, width as f64);
    let mut noise_rng = seeded_rng(seed ^ 0x9e37_79b9_7f4a_7c15);

    let plane = height * width;
    let mut ndct = Vec::with_capacity(n_slices * plane);
    for s in 0..n_slices {
        ndct.extend(render_slice(&anatomy, s as f64 / n_slices as f64, height, width));
    }
    let ldct: Vec<f64> = ndct
        .iter()
        .map(|&v| {
            let n1: f64 = noise_rng.sample(StandardNormal);
            let n2: f64 = noise_rng.sample(StandardNormal);
            (v + (dose.kappa * v).sqrt() * n1 + dose.sigma_g * n2).clamp(0.0, 1.0)
        })
        .collect();

    let shape = [n_slices, 1, height, width];
    let low = PatientVolume::new(patient_id, Tensor::new(&shape, ldct)?, Dose::Low, Provenance::Phantom)?;
    let normal = PatientVolume::new(patient_id, Tensor::new(&shape, ndct)?, Dose::Normal, Provenance::Phantom)?;
    Ok((low, normal))
}
