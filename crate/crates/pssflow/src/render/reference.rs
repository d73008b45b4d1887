//! Brute-force reference images: per pixel, stratified camera rays, and at
//! every shading point a sum over all lights with stratified area samples.
//! Slow and clean; the estimator pipelines are validated against it.

use super::blackbox::RenderMode;
use super::geom::cosine_hemisphere;
use super::scene::Scene;
use crate::img::{Image, Rgb};
use crate::rng::aux_stream;
use crate::{Error, Result};
use rand::Rng;
use rayon::prelude::*;
use std::f64::consts::PI;

/// Sum over every light of a stratified `quality`-sample area estimate.
fn all_lights(
    scene: &Scene,
    point: super::geom::Vec3,
    normal: super::geom::Vec3,
    src_prim: usize,
    albedo: Rgb,
    quality: usize,
    rng: &mut impl Rng,
) -> Rgb {
    let mut acc = [0.0; 3];
    for li in 0..scene.light_count() {
        let light = scene.light(li);
        let lp = scene.light_prim_index(li);
        let n = light.raw_normal();
        let area = light.area();
        let mut sum = [0.0; 3];
        for s in 0..quality {
            // stratify along u, jitter both coordinates
            let a = (s as f64 + rng.gen::<f64>()) / quality as f64;
            let b = rng.gen::<f64>();
            let q = light.point(a, b);
            let to_light = q - point;
            let dist2 = to_light.length_squared();
            if dist2 < 1e-12 {
                continue;
            }
            let dir = to_light * (1.0 / dist2.sqrt());
            let cos_p = normal.dot(dir);
            let cos_q = n.dot(-dir);
            if cos_p <= 0.0 || cos_q <= 0.0 {
                continue;
            }
            if scene.occluded(point, q, src_prim, lp) {
                continue;
            }
            let g = cos_p * cos_q / dist2;
            for c in 0..3 {
                sum[c] += light.emission[c] * g;
            }
        }
        let w = area / (PI * quality as f64);
        for c in 0..3 {
            acc[c] += albedo[c] * sum[c] * w;
        }
    }
    acc
}

fn direct_pixel(scene: &Scene, u: f64, v: f64, quality: usize, rng: &mut impl Rng) -> Rgb {
    let ray = scene.camera.primary_ray(u, v);
    let hit = match scene.intersect(&ray, 1e-9, f64::INFINITY) {
        Some(h) => h,
        None => return [0.0; 3],
    };
    let prim = scene.prim(hit.prim);
    if prim.is_emitter() {
        return if hit.front { prim.emission } else { [0.0; 3] };
    }
    all_lights(scene, hit.point, hit.normal, hit.prim, prim.albedo, quality, rng)
}

fn indirect_pixel(scene: &Scene, u: f64, v: f64, quality: usize, rng: &mut impl Rng) -> Rgb {
    let ray = scene.camera.primary_ray(u, v);
    let hit1 = match scene.intersect(&ray, 1e-9, f64::INFINITY) {
        Some(h) => h,
        None => return [0.0; 3],
    };
    let prim1 = scene.prim(hit1.prim);
    if prim1.is_emitter() {
        return [0.0; 3];
    }
    // stratified cosine directions on a quality x quality grid
    let side = quality;
    let mut acc = [0.0; 3];
    for i in 0..side {
        for j in 0..side {
            let u1 = (i as f64 + rng.gen::<f64>()) / side as f64;
            let u2 = (j as f64 + rng.gen::<f64>()) / side as f64;
            let dir = cosine_hemisphere(hit1.normal, u1, u2);
            let ray2 = super::geom::Ray {
                origin: hit1.point + dir * 1e-9,
                dir,
            };
            let hit2 = match scene.intersect(&ray2, 1e-9, f64::INFINITY) {
                Some(h) => h,
                None => continue,
            };
            if hit2.prim == hit1.prim {
                continue;
            }
            let prim2 = scene.prim(hit2.prim);
            if prim2.is_emitter() {
                continue;
            }
            let nee = all_lights(scene, hit2.point, hit2.normal, hit2.prim, prim2.albedo, 1, rng);
            for c in 0..3 {
                acc[c] += prim1.albedo[c] * nee[c];
            }
        }
    }
    let inv = 1.0 / (side * side) as f64;
    [acc[0] * inv, acc[1] * inv, acc[2] * inv]
}

/// Deterministic brute-force image. `quality` scales every stratification:
/// camera rays per pixel, area samples per light (direct), and the
/// `quality^2` bounce directions per shading point (indirect).
pub fn reference_render(
    scene: &Scene,
    mode: RenderMode,
    width: usize,
    height: usize,
    quality: usize,
    seed: u64,
) -> Result<Image> {
    if width == 0 || height == 0 {
        return Err(Error::invalid("reference_render", "zero-area image"));
    }
    if quality == 0 {
        return Err(Error::invalid("reference_render", "quality must be at least 1"));
    }
    if matches!(mode, RenderMode::Toy(_)) {
        return Err(Error::invalid(
            "reference_render",
            "toy targets have no image; reference rendering needs a scene mode",
        ));
    }
    let pixels: Vec<Rgb> = (0..width * height)
        .into_par_iter()
        .map(|idx| {
            let (px, py) = (idx % width, idx / width);
            let mut rng = aux_stream(seed ^ 0x5eed_0f0f, idx as u64);
            let mut acc = [0.0; 3];
            for s in 0..quality {
                // jittered stratified camera position inside the pixel
                let ju = (s as f64 + rng.gen::<f64>()) / quality as f64;
                let jv = rng.gen::<f64>();
                let u = (px as f64 + ju) / width as f64;
                let v = (py as f64 + jv) / height as f64;
                let c = match mode {
                    RenderMode::Direct3 => direct_pixel(scene, u, v, quality, &mut rng),
                    RenderMode::Indirect5 => indirect_pixel(scene, u, v, quality, &mut rng),
                    RenderMode::Toy(_) => unreachable!(),
                };
                for k in 0..3 {
                    acc[k] += c[k];
                }
            }
            let inv = 1.0 / quality as f64;
            [acc[0] * inv, acc[1] * inv, acc[2] * inv]
        })
        .collect();
    Image::from_pixels(width, height, pixels)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::render::scene::{box_manylights, builtin, Camera, Scene};
    use crate::img::luminance;

    #[test]
    fn zero_radiance_scene_renders_black_and_deterministic() {
        use crate::render::geom::{v3, Quad};
        let cam = Camera {
            position: v3(0.5, 1.5, 2.5),
            look_at: v3(0.5, 0.0, 0.5),
            up: v3(0.0, 1.0, 0.0),
            fov_deg: 50.0,
            aspect: 1.0,
        };
        let floor = Quad {
            corner: v3(0.0, 0.0, 0.0),
            edge_u: v3(1.0, 0.0, 0.0),
            edge_v: v3(0.0, 0.0, 1.0),
            albedo: [0.8; 3],
            emission: [0.0; 3],
        };
        let dead_lamp = Quad {
            corner: v3(0.0, 2.0, 0.0),
            edge_u: v3(1.0, 0.0, 0.0),
            edge_v: v3(0.0, 0.0, 1.0),
            albedo: [0.0; 3],
            emission: [0.0; 3],
        };
        let scene = Scene::from_parts("dead", cam, vec![floor], vec![dead_lamp]).unwrap();
        let img = reference_render(&scene, RenderMode::Direct3, 16, 16, 2, 1).unwrap();
        assert_eq!(img.max_luminance(), 0.0);
        let img2 = reference_render(&scene, RenderMode::Direct3, 16, 16, 2, 1).unwrap();
        assert_eq!(img.pixels(), img2.pixels());
        let dirty = reference_render(&box_manylights(), RenderMode::Direct3, 8, 8, 2, 1).unwrap();
        let again = reference_render(&box_manylights(), RenderMode::Direct3, 8, 8, 2, 1).unwrap();
        assert_eq!(dirty.pixels(), again.pixels());
    }

    #[test]
    fn doubling_quality_stays_within_noise() {
        let scene = builtin("box-manylights").unwrap();
        let a = reference_render(&scene, RenderMode::Direct3, 24, 20, 4, 7).unwrap();
        let b = reference_render(&scene, RenderMode::Direct3, 24, 20, 8, 8).unwrap();
        // compare bright pixels in relative terms
        let max = a.max_luminance();
        let mut worst: f64 = 0.0;
        for (pa, pb) in a.pixels().iter().zip(b.pixels()) {
            let la = luminance(*pa);
            let lb = luminance(*pb);
            if la > 0.1 * max {
                worst = worst.max((la - lb).abs() / la);
            }
        }
        assert!(worst < 0.35, "quality doubling moved a bright pixel by {}", worst);
    }

    #[test]
    fn rejects_bad_arguments() {
        let cam = Camera {
            position: crate::render::geom::v3(0.0, 0.0, 1.0),
            look_at: crate::render::geom::v3(0.0, 0.0, 0.0),
            up: crate::render::geom::v3(0.0, 1.0, 0.0),
            fov_deg: 60.0,
            aspect: 1.0,
        };
        let lamp = crate::render::geom::Quad {
            corner: crate::render::geom::v3(0.0, 1.0, 0.0),
            edge_u: crate::render::geom::v3(1.0, 0.0, 0.0),
            edge_v: crate::render::geom::v3(0.0, 0.0, 1.0),
            albedo: [0.0; 3],
            emission: [1.0; 3],
        };
        let scene = Scene::from_parts("s", cam, vec![], vec![lamp]).unwrap();
        assert!(reference_render(&scene, RenderMode::Direct3, 0, 8, 1, 0).is_err());
        assert!(reference_render(&scene, RenderMode::Direct3, 8, 8, 0, 0).is_err());
    }
}
