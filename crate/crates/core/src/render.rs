//! Deterministic software rasterizer producing color images and face-ID
//! buffers.
//!
//! One sample per pixel at the pixel center, perspective projection, z-buffer
//! visibility, no back-face culling. The face-ID buffer is the contract; color
//! is a flat headlight shade used only for display and as backend input.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::mesh::{Mesh, Vec3};
use crate::{Error, Result};

/// Face-ID value for pixels not covered by any face.
pub const BACKGROUND: u32 = u32::MAX;

/// Depth below which geometry is clipped away.
const NEAR: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub position: [f64; 3],
    pub look_at: [f64; 3],
    pub up: [f64; 3],
    pub fov_degrees: f64,
    pub width: u32,
    pub height: u32,
}

/// Orthonormal camera frame plus projection constants.
#[derive(Debug, Clone, Copy)]
pub struct CameraFrame {
    pub origin: Vec3,
    pub right: Vec3,
    pub up: Vec3,
    pub forward: Vec3,
    focal: f64,
    aspect: f64,
    width: f64,
    height: f64,
}

impl Camera {
    pub fn new(
        position: Vec3,
        look_at: Vec3,
        up: Vec3,
        fov_degrees: f64,
        width: u32,
        height: u32,
    ) -> Result<Self> {
        let cam = Self {
            position: position.into(),
            look_at: look_at.into(),
            up: up.into(),
            fov_degrees,
            width,
            height,
        };
        cam.validate()?;
        Ok(cam)
    }

    pub fn validate(&self) -> Result<()> {
        let pos = Vec3::from(self.position);
        let at = Vec3::from(self.look_at);
        let up = Vec3::from(self.up);
        let fwd = at - pos;
        if !(fwd.norm() > 0.0) {
            return Err(Error::InvalidCamera("position equals look_at".into()));
        }
        if !(self.fov_degrees > 0.0 && self.fov_degrees < 180.0) {
            return Err(Error::InvalidCamera(format!(
                "field of view {} outside (0, 180)",
                self.fov_degrees
            )));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::InvalidCamera("image size must be at least 1x1".into()));
        }
        if !(fwd.normalize().cross(&up).norm() > 1e-9) {
            return Err(Error::InvalidCamera("up vector is parallel to view direction".into()));
        }
        Ok(())
    }

    pub fn frame(&self) -> CameraFrame {
        let origin = Vec3::from(self.position);
        let forward = (Vec3::from(self.look_at) - origin).normalize();
        let right = forward.cross(&Vec3::from(self.up)).normalize();
        let up = right.cross(&forward);
        CameraFrame {
            origin,
            right,
            up,
            forward,
            focal: 1.0 / (self.fov_degrees.to_radians() / 2.0).tan(),
            aspect: self.width as f64 / self.height as f64,
            width: self.width as f64,
            height: self.height as f64,
        }
    }
}

impl CameraFrame {
    /// View-space coordinates (right, up, depth along the view direction).
    pub fn to_view(&self, p: &Vec3) -> Vec3 {
        let d = p - self.origin;
        Vec3::new(d.dot(&self.right), d.dot(&self.up), d.dot(&self.forward))
    }

    fn view_to_screen(&self, v: &Vec3) -> (f64, f64) {
        let nx = v.x * self.focal / (self.aspect * v.z);
        let ny = v.y * self.focal / v.z;
        ((nx + 1.0) * 0.5 * self.width, (1.0 - ny) * 0.5 * self.height)
    }

    /// Continuous screen position (pixel units, origin at the top-left corner)
    /// and depth of a world point, or `None` if it is behind the near plane.
    pub fn project(&self, p: &Vec3) -> Option<(f64, f64, f64)> {
        let v = self.to_view(p);
        if v.z <= NEAR {
            return None;
        }
        let (sx, sy) = self.view_to_screen(&v);
        Some((sx, sy, v.z))
    }
}

/// Cameras evenly spaced in azimuth around the Y axis at elevation 0, looking
/// at the origin. Camera 0 sits on +Z; azimuth increases toward +X.
pub fn make_view_ring(
    n_views: usize,
    width: u32,
    height: u32,
    distance: f64,
    fov_degrees: f64,
) -> Result<Vec<Camera>> {
    make_view_ring_at(n_views, width, height, distance, fov_degrees, 0.0)
}

/// [`make_view_ring`] with every camera raised to `elevation_degrees`.
pub fn make_view_ring_at(
    n_views: usize,
    width: u32,
    height: u32,
    distance: f64,
    fov_degrees: f64,
    elevation_degrees: f64,
) -> Result<Vec<Camera>> {
    if n_views == 0 {
        return Err(Error::InvalidArgument("need at least one view".into()));
    }
    if !(distance > 1.0) {
        return Err(Error::InvalidArgument(format!(
            "camera distance {distance} must exceed the unit sphere"
        )));
    }
    if !(elevation_degrees.abs() < 90.0) {
        return Err(Error::InvalidArgument(format!(
            "elevation {elevation_degrees} must be within (-90, 90)"
        )));
    }
    let el = elevation_degrees.to_radians();
    (0..n_views)
        .map(|i| {
            let az = std::f64::consts::TAU * i as f64 / n_views as f64;
            let pos = Vec3::new(az.sin() * el.cos(), el.sin(), az.cos() * el.cos()) * distance;
            Camera::new(pos, Vec3::zeros(), Vec3::y(), fov_degrees, width, height)
        })
        .collect()
}

/// One rendered view: color image, face-ID buffer and depth buffer, row-major
/// with the origin at the top-left pixel.
#[derive(Debug, Clone)]
pub struct ViewRender {
    pub view_index: usize,
    pub camera: Camera,
    pub width: u32,
    pub height: u32,
    /// RGB, 3 bytes per pixel.
    pub color: Vec<u8>,
    pub face_id: Vec<u32>,
    /// View-space depth; `+inf` where `face_id` is [`BACKGROUND`].
    pub depth: Vec<f64>,
}

impl ViewRender {
    pub fn pixel_count(&self) -> usize {
        self.width as usize * self.height as usize
    }

    pub fn face_at(&self, x: u32, y: u32) -> u32 {
        self.face_id[y as usize * self.width as usize + x as usize]
    }

    /// Writes the color image as an 8-bit RGB PNG.
    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        let img = image::RgbImage::from_raw(self.width, self.height, self.color.clone())
            .expect("color buffer matches dimensions");
        img.save_with_format(path, image::ImageFormat::Png)?;
        Ok(())
    }

    /// PNG-encoded color image.
    pub fn png_bytes(&self) -> Vec<u8> {
        encode_png_rgb(self.width, self.height, &self.color)
    }

    /// Raw face-ID dump: one little-endian u32 per pixel, row-major,
    /// [`BACKGROUND`] = 0xFFFFFFFF.
    pub fn save_face_ids(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut out = std::io::BufWriter::new(
            std::fs::File::create(path).map_err(|e| Error::io(path, e))?,
        );
        for id in &self.face_id {
            out.write_all(&id.to_le_bytes()).map_err(|e| Error::io(path, e))?;
        }
        out.flush().map_err(|e| Error::io(path, e))
    }
}

pub(crate) fn encode_png_rgb(width: u32, height: u32, rgb: &[u8]) -> Vec<u8> {
    let mut buf = std::io::Cursor::new(Vec::new());
    image::RgbImage::from_raw(width, height, rgb.to_vec())
        .expect("buffer matches dimensions")
        .write_to(&mut buf, image::ImageFormat::Png)
        .expect("in-memory PNG encoding");
    buf.into_inner()
}

/// Renders `mesh` through `camera`.
///
/// For every pixel whose center lies inside at least one projected triangle,
/// the face with the smallest view-space depth at that center wins; exact
/// depth ties keep the lower face index.
pub fn rasterize(mesh: &Mesh, camera: &Camera, view_index: usize) -> ViewRender {
    let frame = camera.frame();
    let (w, h) = (camera.width as usize, camera.height as usize);
    let mut face_id = vec![BACKGROUND; w * h];
    let mut depth = vec![f64::INFINITY; w * h];
    let mut shade = vec![0u8; mesh.face_count()];

    for (fi, _) in mesh.faces().iter().enumerate() {
        let world = mesh.face_vertices(fi);
        let view = world.map(|p| frame.to_view(&p));

        let normal = (world[1] - world[0]).cross(&(world[2] - world[0]));
        let to_cam = frame.origin - (world[0] + world[1] + world[2]) / 3.0;
        let cos = if normal.norm() > 0.0 && to_cam.norm() > 0.0 {
            normal.normalize().dot(&to_cam.normalize()).abs()
        } else {
            0.0
        };
        shade[fi] = (40.0 + 200.0 * cos).round() as u8;

        let poly = clip_near(&view);
        if poly.len() < 3 {
            continue;
        }
        let screen: Vec<(f64, f64, f64)> = poly
            .iter()
            .map(|v| {
                let (sx, sy) = frame.view_to_screen(v);
                (sx, sy, 1.0 / v.z)
            })
            .collect();
        for k in 1..screen.len() - 1 {
            raster_triangle(
                [screen[0], screen[k], screen[k + 1]],
                fi as u32,
                w,
                h,
                &mut face_id,
                &mut depth,
            );
        }
    }

    let mut color = vec![0u8; w * h * 3];
    for (p, &id) in face_id.iter().enumerate() {
        if id != BACKGROUND {
            let s = shade[id as usize];
            color[p * 3..p * 3 + 3].copy_from_slice(&[s, s, s]);
        }
    }
    ViewRender {
        view_index,
        camera: *camera,
        width: camera.width,
        height: camera.height,
        color,
        face_id,
        depth,
    }
}

/// Clips a view-space triangle against the near plane (Sutherland-Hodgman).
fn clip_near(tri: &[Vec3; 3]) -> Vec<Vec3> {
    if tri.iter().all(|v| v.z > NEAR) {
        return tri.to_vec();
    }
    let mut out = Vec::with_capacity(4);
    for i in 0..3 {
        let a = tri[i];
        let b = tri[(i + 1) % 3];
        let a_in = a.z > NEAR;
        let b_in = b.z > NEAR;
        if a_in {
            out.push(a);
        }
        if a_in != b_in {
            let t = (NEAR - a.z) / (b.z - a.z);
            let mut p = a + (b - a) * t;
            p.z = NEAR.max(p.z);
            out.push(p);
        }
    }
    out
}

#[inline]
fn edge(a: (f64, f64), b: (f64, f64), p: (f64, f64)) -> f64 {
    (b.0 - a.0) * (p.1 - a.1) - (b.1 - a.1) * (p.0 - a.0)
}

/// `verts` are (screen x, screen y, 1/depth).
fn raster_triangle(
    verts: [(f64, f64, f64); 3],
    face: u32,
    w: usize,
    h: usize,
    face_id: &mut [u32],
    depth: &mut [f64],
) {
    let p = verts.map(|v| (v.0, v.1));
    let area = edge(p[0], p[1], p[2]);
    if !(area.abs() > 0.0) || !area.is_finite() {
        return;
    }
    let sign = area.signum();
    let min_x = p.iter().map(|v| v.0).fold(f64::INFINITY, f64::min);
    let max_x = p.iter().map(|v| v.0).fold(f64::NEG_INFINITY, f64::max);
    let min_y = p.iter().map(|v| v.1).fold(f64::INFINITY, f64::min);
    let max_y = p.iter().map(|v| v.1).fold(f64::NEG_INFINITY, f64::max);
    // pixel x covers [x, x+1); its center is x + 0.5
    let x0 = ((min_x - 0.5).ceil().max(0.0)) as usize;
    let y0 = ((min_y - 0.5).ceil().max(0.0)) as usize;
    let x1 = (max_x - 0.5).floor().min(w as f64 - 1.0);
    let y1 = (max_y - 0.5).floor().min(h as f64 - 1.0);
    if x1 < 0.0 || y1 < 0.0 {
        return;
    }
    let (x1, y1) = (x1 as usize, y1 as usize);
    for y in y0..=y1 {
        let cy = y as f64 + 0.5;
        for x in x0..=x1 {
            let c = (x as f64 + 0.5, cy);
            let w0 = edge(p[1], p[2], c) * sign;
            let w1 = edge(p[2], p[0], c) * sign;
            let w2 = edge(p[0], p[1], c) * sign;
            if w0 < 0.0 || w1 < 0.0 || w2 < 0.0 {
                continue;
            }
            let inv_z = (w0 * verts[0].2 + w1 * verts[1].2 + w2 * verts[2].2) / (area * sign);
            if !(inv_z > 0.0) {
                continue;
            }
            let z = 1.0 / inv_z;
            let idx = y * w + x;
            if z < depth[idx] {
                depth[idx] = z;
                face_id[idx] = face;
            }
        }
    }
}

/// First face hit by the ray through pixel center `(x + 0.5, y + 0.5)` and
/// its view-space depth. Brute force over all faces; exact depth ties keep
/// the lower face index.
pub fn pick_face(mesh: &Mesh, camera: &Camera, x: u32, y: u32) -> Option<(u32, f64)> {
    let f = camera.frame();
    let nx = (x as f64 + 0.5) / f.width * 2.0 - 1.0;
    let ny = 1.0 - (y as f64 + 0.5) / f.height * 2.0;
    let dir = f.right * (nx * f.aspect / f.focal) + f.up * (ny / f.focal) + f.forward;
    let mut best: Option<(u32, f64)> = None;
    for fi in 0..mesh.face_count() {
        let [a, b, c] = mesh.face_vertices(fi);
        // Moller-Trumbore, two-sided
        let e1 = b - a;
        let e2 = c - a;
        let p = dir.cross(&e2);
        let det = e1.dot(&p);
        if det.abs() < 1e-15 {
            continue;
        }
        let s = f.origin - a;
        let u = s.dot(&p) / det;
        if !(0.0..=1.0).contains(&u) {
            continue;
        }
        let q = s.cross(&e1);
        let v = dir.dot(&q) / det;
        if v < 0.0 || u + v > 1.0 {
            continue;
        }
        // dir has unit forward component, so t is view depth
        let t = e2.dot(&q) / det;
        if t <= NEAR {
            continue;
        }
        if best.is_none_or(|(_, d)| t < d) {
            best = Some((fi as u32, t));
        }
    }
    best
}

/// Pixel count per visible face.
pub fn visible_faces(view: &ViewRender) -> BTreeMap<u32, usize> {
    let mut hist = BTreeMap::new();
    for &id in &view.face_id {
        if id != BACKGROUND {
            *hist.entry(id).or_insert(0) += 1;
        }
    }
    hist
}
