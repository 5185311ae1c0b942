//! Browser demo: watch a radiance field distill from a front/back keyed
//! sphere prior, look at the skeleton conditioning images it is guided by,
//! and scrub the forward noising process on a synthetic subject sprite.

use wasm_bindgen::prelude::*;

use avatar_distill::distill::{CameraSampler, DistillConfig, DistillState};
use avatar_distill::field::{FieldConfig, HashGridConfig, RadianceField};
use avatar_distill::geometry::{rasterize_skeleton, ArticulatedSkeleton};
use avatar_distill::guidance::{add_noise, gaussian_image, DiskColors, DiskPrior, NoiseSchedule, Vocabulary};
use avatar_distill::image::{quantize_u8, Image};
use avatar_distill::math::{mix_seed, rng_from_seed, Aabb};
use avatar_distill::optim::Precision;
use avatar_distill::render::{render_image, CameraPose, RenderSettings};
use avatar_distill::schedule::{ResolutionSchedule, Stage, ZoomMode};
use avatar_distill::synth::{draw_sprite, random_pose};

const DISTANCE: f64 = 1.5;
const FOV: f64 = 0.74;
const FRONT: [f64; 3] = [0.9, 0.2, 0.2];
const BACK: [f64; 3] = [0.2, 0.3, 0.9];

fn js_err(e: avatar_distill::Error) -> JsValue {
    JsValue::from_str(&e.to_string())
}

/// Row-major RGBA bytes for a canvas `ImageData`.
fn rgba(img: &Image) -> Vec<u8> {
    let mut out = Vec::with_capacity(img.height * img.width * 4);
    for r in 0..img.height {
        for c in 0..img.width {
            let p = img.pixel(r, c);
            let px = if img.channels >= 3 { [p[0], p[1], p[2]] } else { [p[0]; 3] };
            out.extend(px.iter().map(|&v| quantize_u8(v)));
            out.push(255);
        }
    }
    out
}

fn orbit(azimuth_deg: f64, elevation_deg: f64) -> Result<CameraPose, JsValue> {
    CameraPose::orbit([0.0; 3], DISTANCE, azimuth_deg.to_radians(), elevation_deg.to_radians(), FOV).map_err(js_err)
}

fn skeleton() -> ArticulatedSkeleton {
    ArticulatedSkeleton::canonical_a_pose().scaled(0.6)
}

#[wasm_bindgen]
pub struct Demo {
    state: DistillState<DiskPrior>,
}

#[wasm_bindgen]
impl Demo {
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u64) -> Result<Demo, JsValue> {
        let field_cfg = FieldConfig {
            encoding: HashGridConfig { levels: 6, base_resolution: 8, growth: 1.5, table_size: 1 << 12, feature_dim: 2 },
            density_hidden: vec![32],
            color_hidden: vec![32],
            bbox: Aabb::cube(0.3),
            density_bias: -1.0,
            table_init: 1e-4,
        };
        let field = RadianceField::new(field_cfg, &mut rng_from_seed(seed)).map_err(js_err)?;
        let noise = NoiseSchedule::cosine(1000).map_err(js_err)?;
        let prior = DiskPrior {
            schedule: noise.clone(),
            sphere_radius: 0.25,
            camera_distance: DISTANCE,
            fov_y: FOV,
            colors: DiskColors::Keyed { front: FRONT, back: BACK },
            std: 0.01,
        };
        let config = DistillConfig {
            lambda_geo: 0.0,
            guidance_weight: 1.0,
            samples_per_ray: 24,
            background: Some([0.0; 3]),
            camera: CameraSampler {
                target: [0.0; 3],
                radius: [DISTANCE, DISTANCE],
                elevation: [-0.3, 0.3],
                azimuth: [0.0, std::f64::consts::TAU],
                fov: [FOV, FOV],
                look_at_jitter: 0.0,
            },
            ..DistillConfig::default()
        };
        let schedule = ResolutionSchedule::new(vec![Stage {
            start_step: 0,
            render: [20, 20],
            upsample: [40, 40],
            zoom: ZoomMode::FullBody,
            zoom_probability: 0.0,
        }])
        .map_err(js_err)?;
        let state = DistillState::new(
            field,
            prior,
            noise,
            skeleton(),
            vec![],
            schedule,
            config,
            Vocabulary::default(),
            seed,
            Precision::F64,
        )
        .map_err(js_err)?;
        Ok(Demo { state })
    }

    /// Runs `n` more distillation steps; returns the total step count.
    pub fn step(&mut self, n: u32) -> Result<u32, JsValue> {
        for _ in 0..n {
            self.state.sds_step().map_err(js_err)?;
        }
        Ok(self.state.step as u32)
    }

    pub fn steps_done(&self) -> u32 {
        self.state.step as u32
    }

    /// Current field seen from an orbit camera, `size × size` RGBA.
    pub fn render(&self, azimuth_deg: f64, elevation_deg: f64, size: usize) -> Result<Vec<u8>, JsValue> {
        let settings = RenderSettings { height: size, width: size, samples_per_ray: 48, background: [0.0; 3] };
        let cam = orbit(azimuth_deg, elevation_deg)?;
        let out = render_image(&self.state.field, &cam, &settings, None, &mut rng_from_seed(0)).map_err(js_err)?;
        Ok(rgba(&out.color))
    }
}

/// Skeleton conditioning image the guidance sees from this camera.
#[wasm_bindgen]
pub fn skeleton_view(azimuth_deg: f64, elevation_deg: f64, size: usize) -> Result<Vec<u8>, JsValue> {
    let raster = rasterize_skeleton(&skeleton(), &orbit(azimuth_deg, elevation_deg)?, size, size).map_err(js_err)?;
    Ok(rgba(&raster.image))
}

/// A synthetic subject sprite noised to timestep `t` of a 1000-step cosine
/// schedule, `size × size` RGBA.
#[wasm_bindgen]
pub fn noise_preview(t: usize, size: usize, seed: u64) -> Result<Vec<u8>, JsValue> {
    let noise = NoiseSchedule::cosine(1000).map_err(js_err)?;
    let mut rng = rng_from_seed(seed);
    let pose = random_pose(&mut rng, 0.7);
    let sprite = draw_sprite(&pose, size, true, [0.0; 3])
        .map_err(js_err)?
        .ok_or_else(|| JsValue::from_str("pose left the frame; try another seed"))?;
    let x0 = sprite.to_training(&Vocabulary::default(), [1.0; 3]).map_err(js_err)?.image.to_signed();
    let eps = gaussian_image(size, size, 3, &mut rng_from_seed(mix_seed(seed, 1)));
    let x_t = if t == 0 { x0 } else { add_noise(&noise, &x0, t.min(1000), &eps).map_err(js_err)? };
    Ok(rgba(&x_t.to_unit().map(|v| v.clamp(0.0, 1.0))))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn operations_return_rgba_buffers() {
        let mut demo = Demo::new(1).unwrap();
        assert_eq!(demo.step(2).unwrap(), 2);
        assert_eq!(demo.render(30.0, 10.0, 12).unwrap().len(), 12 * 12 * 4);
        assert_eq!(skeleton_view(0.0, 0.0, 16).unwrap().len(), 16 * 16 * 4);
        let clean = noise_preview(0, 16, 3).unwrap();
        let noisy = noise_preview(900, 16, 3).unwrap();
        assert_eq!(clean.len(), 16 * 16 * 4);
        assert_ne!(clean, noisy);
    }
}
