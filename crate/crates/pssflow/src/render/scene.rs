//! Scenes: a pinhole camera, diffuse quads, and emissive quad lights.
//!
//! The JSON schema mirrors the structs directly: `camera`, `quads`
//! (non-emissive geometry with an `albedo`), and `lights` (quads with a
//! `radiance`). Light order in the file defines the light-selector indexing
//! the warp learns over, so it is preserved verbatim.

use super::geom::{v3, Hit, Quad, Ray, Vec3};
use crate::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Camera {
    pub position: Vec3,
    pub look_at: Vec3,
    pub up: Vec3,
    pub fov_deg: f64,
    /// Fixed width/height ratio of the image plane. Part of the scene, not
    /// of any particular render target, so the black box is independent of
    /// output resolution.
    pub aspect: f64,
}

impl Camera {
    /// Ray through normalized image coordinates; `u` to the right, `v` down.
    pub fn primary_ray(&self, u: f64, v: f64) -> Ray {
        let forward = (self.look_at - self.position).normalized();
        let right = forward.cross(self.up).normalized();
        let cam_up = right.cross(forward);
        let half_h = (self.fov_deg.to_radians() * 0.5).tan();
        let half_w = half_h * self.aspect;
        let dir = forward + right * ((2.0 * u - 1.0) * half_w) + cam_up * ((1.0 - 2.0 * v) * half_h);
        Ray {
            origin: self.position,
            dir: dir.normalized(),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct SceneFile {
    camera: Camera,
    #[serde(default)]
    quads: Vec<Quad>,
    #[serde(default)]
    lights: Vec<Quad>,
}

#[derive(Clone, Debug)]
pub struct Scene {
    pub camera: Camera,
    prims: Vec<Quad>,
    /// Indices into `prims` of the emitters, in file order.
    lights: Vec<usize>,
    name: String,
}

impl Scene {
    pub fn from_parts(name: &str, camera: Camera, quads: Vec<Quad>, lights: Vec<Quad>) -> Result<Self> {
        if lights.is_empty() {
            return Err(Error::Scene("a scene needs at least one light".into()));
        }
        for (i, q) in quads.iter().chain(lights.iter()).enumerate() {
            if q.area() < 1e-12 {
                return Err(Error::Scene(format!("degenerate zero-area quad at index {}", i)));
            }
        }
        if lights.iter().any(|l| l.emission.iter().any(|&c| c < 0.0)) {
            return Err(Error::Scene("negative light radiance".into()));
        }
        let mut prims = quads;
        let mut light_idx = Vec::with_capacity(lights.len());
        for l in lights {
            light_idx.push(prims.len());
            prims.push(l);
        }
        Ok(Scene {
            camera,
            prims,
            lights: light_idx,
            name: name.to_string(),
        })
    }

    pub fn from_json_str(name: &str, json: &str) -> Result<Self> {
        let file: SceneFile = serde_json::from_str(json)?;
        Scene::from_parts(name, file.camera, file.quads, file.lights)
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        let name = path.as_ref().display().to_string();
        let text = std::fs::read_to_string(path.as_ref())
            .map_err(|e| Error::Scene(format!("cannot read {}: {}", name, e)))?;
        Scene::from_json_str(&name, &text)
    }

    pub fn to_json(&self) -> Result<String> {
        let mut quads = Vec::new();
        let mut lights = Vec::new();
        for (i, q) in self.prims.iter().enumerate() {
            if self.lights.contains(&i) {
                lights.push(q.clone());
            } else {
                quads.push(q.clone());
            }
        }
        Ok(serde_json::to_string_pretty(&SceneFile {
            camera: self.camera.clone(),
            quads,
            lights,
        })?)
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn light_count(&self) -> usize {
        self.lights.len()
    }

    pub fn light(&self, idx: usize) -> &Quad {
        &self.prims[self.lights[idx]]
    }

    pub fn light_prim_index(&self, idx: usize) -> usize {
        self.lights[idx]
    }

    pub fn prim(&self, idx: usize) -> &Quad {
        &self.prims[idx]
    }

    pub fn prims(&self) -> &[Quad] {
        &self.prims
    }

    /// Nearest hit; brute force over the primitive list.
    pub fn intersect(&self, ray: &Ray, t_min: f64, t_max: f64) -> Option<Hit> {
        let mut best: Option<(f64, Vec3, usize)> = None;
        let mut closest = t_max;
        for (i, q) in self.prims.iter().enumerate() {
            if let Some((t, n)) = q.intersect(ray, t_min, closest) {
                closest = t;
                best = Some((t, n, i));
            }
        }
        best.map(|(t, n, i)| {
            let front = ray.dir.dot(n) < 0.0;
            Hit {
                t,
                point: ray.at(t),
                normal: if front { n } else { -n },
                front,
                prim: i,
            }
        })
    }

    /// Is the segment from `origin` toward `target` blocked before reaching
    /// it? `skip_src`/`skip_dst` exclude the endpoint primitives (a planar
    /// quad cannot shadow a ray leaving its own surface).
    pub fn occluded(&self, origin: Vec3, target: Vec3, skip_src: usize, skip_dst: usize) -> bool {
        let delta = target - origin;
        let dist = delta.length();
        let ray = Ray {
            origin,
            dir: delta * (1.0 / dist),
        };
        let t_max = dist * (1.0 - 1e-9);
        for (i, q) in self.prims.iter().enumerate() {
            if i == skip_src || i == skip_dst {
                continue;
            }
            if q.intersect(&ray, 1e-9, t_max).is_some() {
                return true;
            }
        }
        false
    }
}

/// The built-in analog of a room lit by many strongly unequal area lights,
/// several shadowed by panels: a Cornell-style open box with a 4 x 4 ceiling
/// grid of lights whose radiances span three orders of magnitude.
pub fn box_manylights() -> Scene {
    // pitched down from just under the ceiling: the whole light grid stays
    // outside the frustum, so no pixel ever sees an emitter directly
    let camera = Camera {
        position: v3(2.0, 2.1, 7.0),
        look_at: v3(2.0, 0.1, 0.0),
        up: v3(0.0, 1.0, 0.0),
        fov_deg: 36.0,
        aspect: 1.25,
    };
    let mut quads = vec![
        // floor
        wall(v3(0.0, 0.0, 0.0), v3(4.0, 0.0, 0.0), v3(0.0, 0.0, 4.2), [0.74, 0.74, 0.72]),
        // ceiling
        wall(v3(0.0, 2.5, 0.0), v3(0.0, 0.0, 4.2), v3(4.0, 0.0, 0.0), [0.8, 0.8, 0.8]),
        // back wall
        wall(v3(0.0, 0.0, 0.0), v3(0.0, 2.5, 0.0), v3(4.0, 0.0, 0.0), [0.7, 0.7, 0.68]),
        // left and right walls
        wall(v3(0.0, 0.0, 0.0), v3(0.0, 0.0, 4.2), v3(0.0, 2.5, 0.0), [0.66, 0.26, 0.24]),
        wall(v3(4.0, 0.0, 0.0), v3(0.0, 2.5, 0.0), v3(0.0, 0.0, 4.2), [0.24, 0.3, 0.64]),
        // a low box on the floor for extra occlusion structure
        wall(v3(0.8, 0.0, 1.2), v3(0.9, 0.0, 0.3), v3(0.0, 0.9, 0.0), [0.7, 0.65, 0.5]),
        wall(v3(1.7, 0.0, 1.5), v3(-0.3, 0.0, 0.9), v3(0.0, 0.9, 0.0), [0.7, 0.65, 0.5]),
        wall(v3(0.8, 0.9, 1.2), v3(0.9, 0.0, 0.3), v3(-0.3, 0.0, 0.9), [0.7, 0.65, 0.5]),
    ];

    // panels hanging under a subset of the grid positions
    let paneled = [0usize, 5, 10, 12, 15];
    // radiance scale per grid cell: two dominant, two medium, twelve dim
    let power: [f64; 16] = [
        170.0, 0.25, 0.6, 0.12, 0.4, 9.0, 0.18, 0.7, 0.3, 0.09, 130.0, 0.5, 0.22, 6.0, 0.15, 0.35,
    ];
    let tint: [[f64; 3]; 4] = [
        [1.0, 0.9, 0.75],
        [0.85, 0.95, 1.0],
        [1.0, 1.0, 0.9],
        [0.95, 0.85, 1.0],
    ];
    let mut lights = Vec::new();
    for ix in 0..4usize {
        for iz in 0..4usize {
            let g = ix * 4 + iz;
            let cx = 0.5 + ix as f64;
            let cz = 0.5 + iz as f64;
            let p = power[g];
            let t = tint[g % 4];
            lights.push(Quad {
                corner: v3(cx - 0.11, 2.49, cz - 0.11),
                edge_u: v3(0.22, 0.0, 0.0),
                edge_v: v3(0.0, 0.0, 0.22),
                albedo: [0.0; 3],
                emission: [p * t[0], p * t[1], p * t[2]],
            });
            if paneled.contains(&g) {
                quads.push(wall(
                    v3(cx - 0.3, 2.28, cz - 0.3),
                    v3(0.6, 0.0, 0.0),
                    v3(0.0, 0.0, 0.6),
                    [0.5, 0.5, 0.5],
                ));
            }
        }
    }
    Scene::from_parts("box-manylights", camera, quads, lights).expect("builtin scene is valid")
}

/// The built-in analog of a camera room lit only through a doorway: all
/// lights sit in an adjacent room, hidden from the camera, so one-bounce
/// transport dominates what the camera sees.
pub fn corridor_indirect() -> Scene {
    let camera = Camera {
        position: v3(1.9, 1.3, 4.7),
        look_at: v3(2.0, 1.15, 0.0),
        up: v3(0.0, 1.0, 0.0),
        fov_deg: 55.0,
        aspect: 1.25,
    };
    let bright = [0.72, 0.71, 0.68];
    let quads = vec![
        // shared floor and ceiling across both rooms (z in [-3, 5])
        wall(v3(0.0, 0.0, -3.0), v3(4.0, 0.0, 0.0), v3(0.0, 0.0, 8.0), [0.68, 0.67, 0.64]),
        wall(v3(0.0, 2.5, -3.0), v3(0.0, 0.0, 8.0), v3(4.0, 0.0, 0.0), bright),
        // side walls
        wall(v3(0.0, 0.0, -3.0), v3(0.0, 0.0, 8.0), v3(0.0, 2.5, 0.0), [0.66, 0.55, 0.42]),
        wall(v3(4.0, 0.0, -3.0), v3(0.0, 2.5, 0.0), v3(0.0, 0.0, 8.0), [0.45, 0.55, 0.66]),
        // far wall of the light room and wall behind the camera
        wall(v3(0.0, 0.0, -3.0), v3(0.0, 2.5, 0.0), v3(4.0, 0.0, 0.0), bright),
        wall(v3(0.0, 0.0, 5.0), v3(4.0, 0.0, 0.0), v3(0.0, 2.5, 0.0), [0.6, 0.6, 0.6]),
        // divider at z = 0 with a doorway at x in [2.6, 3.9], y in [0, 2.1]
        wall(v3(0.0, 0.0, 0.0), v3(2.6, 0.0, 0.0), v3(0.0, 2.5, 0.0), bright),
        wall(v3(2.6, 2.1, 0.0), v3(1.3, 0.0, 0.0), v3(0.0, 0.4, 0.0), bright),
        wall(v3(3.9, 0.0, 0.0), v3(0.1, 0.0, 0.0), v3(0.0, 2.5, 0.0), bright),
    ];
    let lights = vec![
        Quad {
            corner: v3(0.4, 2.49, -0.95),
            edge_u: v3(1.2, 0.0, 0.0),
            edge_v: v3(0.0, 0.0, 0.55),
            albedo: [0.0; 3],
            emission: [150.0, 142.0, 120.0],
        },
        Quad {
            corner: v3(2.4, 2.49, -0.95),
            edge_u: v3(1.2, 0.0, 0.0),
            edge_v: v3(0.0, 0.0, 0.55),
            albedo: [0.0; 3],
            emission: [118.0, 130.0, 150.0],
        },
    ];
    Scene::from_parts("corridor-indirect", camera, quads, lights).expect("builtin scene is valid")
}

fn wall(corner: Vec3, edge_u: Vec3, edge_v: Vec3, albedo: [f64; 3]) -> Quad {
    Quad {
        corner,
        edge_u,
        edge_v,
        albedo,
        emission: [0.0; 3],
    }
}

/// Look up a built-in scene by id.
pub fn builtin(name: &str) -> Option<Scene> {
    match name {
        "box-manylights" => Some(box_manylights()),
        "corridor-indirect" => Some(corridor_indirect()),
        _ => None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builtins_are_valid_and_roundtrip_through_json() {
        for name in ["box-manylights", "corridor-indirect"] {
            let scene = builtin(name).unwrap();
            assert!(scene.light_count() >= 1);
            let json = scene.to_json().unwrap();
            let back = Scene::from_json_str(name, &json).unwrap();
            assert_eq!(back.light_count(), scene.light_count());
            assert_eq!(back.prims().len(), scene.prims().len());
        }
        assert!(builtin("no-such-scene").is_none());
    }

    #[test]
    fn box_scene_camera_sees_interior_but_no_emitter() {
        let scene = box_manylights();
        for iu in 0..48 {
            for iv in 0..48 {
                let u = (iu as f64 + 0.5) / 48.0;
                let v = (iv as f64 + 0.5) / 48.0;
                let ray = scene.camera.primary_ray(u, v);
                let hit = scene
                    .intersect(&ray, 1e-9, f64::INFINITY)
                    .unwrap_or_else(|| panic!("black pixel at ({}, {})", u, v));
                assert!(
                    !scene.prim(hit.prim).is_emitter(),
                    "camera sees a light at ({}, {})",
                    u,
                    v
                );
            }
        }
    }

    #[test]
    fn corridor_lights_are_hidden_from_the_camera() {
        let scene = corridor_indirect();
        // march the whole image plane; no primary ray may see an emitter
        for iu in 0..40 {
            for iv in 0..40 {
                let u = (iu as f64 + 0.5) / 40.0;
                let v = (iv as f64 + 0.5) / 40.0;
                let ray = scene.camera.primary_ray(u, v);
                if let Some(hit) = scene.intersect(&ray, 1e-9, f64::INFINITY) {
                    assert!(
                        !scene.prim(hit.prim).is_emitter(),
                        "light visible at ({}, {})",
                        u,
                        v
                    );
                }
            }
        }
    }

    #[test]
    fn occlusion_respects_skips() {
        let scene = box_manylights();
        // a paneled light: from under the panel, the light is occluded
        let light = scene.light(0);
        let below = light.point(0.5, 0.5) + v3(0.0, -2.0, 0.0);
        let on_light = light.point(0.5, 0.5);
        assert!(scene.occluded(below, on_light, usize::MAX, scene.light_prim_index(0)));
        // an unpaneled one is visible from the open floor
        let l1 = scene.light(1);
        let target = l1.point(0.5, 0.5);
        let from = v3(3.2, 0.01, 3.2);
        assert!(!scene.occluded(from, target, usize::MAX, scene.light_prim_index(1)));
    }

    #[test]
    fn scene_rejects_degenerate_input() {
        let cam = Camera {
            position: v3(0.0, 0.0, 0.0),
            look_at: v3(0.0, 0.0, -1.0),
            up: v3(0.0, 1.0, 0.0),
            fov_deg: 60.0,
            aspect: 1.0,
        };
        assert!(Scene::from_parts("empty", cam.clone(), vec![], vec![]).is_err());
        let degenerate = Quad {
            corner: v3(0.0, 0.0, 0.0),
            edge_u: v3(0.0, 0.0, 0.0),
            edge_v: v3(0.0, 1.0, 0.0),
            albedo: [0.0; 3],
            emission: [1.0; 3],
        };
        assert!(Scene::from_parts("degenerate", cam, vec![], vec![degenerate]).is_err());
    }
}
