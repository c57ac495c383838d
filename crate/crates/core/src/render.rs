//! Z-buffer depth rasterizer with frozen-assignment depth gradients.
//!
//! Pixel centres sit at integer coordinates. A pixel is covered by a
//! triangle when every edge function is positive, or zero on an edge that
//! owns its boundary (edge direction pointing down, or exactly left); the two
//! triangles sharing an edge disagree on ownership, so shared edges are drawn
//! once. Edge functions are evaluated with a canonical vertex order so the
//! shared value is bit-identical on both sides. Depth ties resolve to the lower
//! triangle index, which makes the result independent of drawing order.

use crate::camera::PinholeIntrinsics;
use crate::error::{check_len, Result};
use crate::geometry::{Vec2, Vec3};

/// Triangles with a vertex closer than this (mm) are dropped.
pub const NEAR_PLANE: f64 = 1.0;
const NO_TRIANGLE: u32 = u32::MAX;

/// Depth image in millimetres; zero means no measurement.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthFrame {
    pub width: usize,
    pub height: usize,
    pub depth: Vec<f32>,
    pub mask: Vec<bool>,
}

impl DepthFrame {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            depth: vec![0.0; width * height],
            mask: vec![false; width * height],
        }
    }

    /// Frame whose mask marks the pixels with a positive measurement.
    pub fn from_depth(width: usize, height: usize, depth: Vec<f32>) -> Result<Self> {
        check_len("depth pixels", width * height, depth.len())?;
        let mask = depth.iter().map(|d| *d > 0.0 && d.is_finite()).collect();
        Ok(Self {
            width,
            height,
            depth,
            mask,
        })
    }

    pub fn len(&self) -> usize {
        self.depth.len()
    }

    pub fn is_empty(&self) -> bool {
        self.depth.is_empty()
    }

    pub fn index(&self, col: usize, row: usize) -> usize {
        row * self.width + col
    }

    pub fn at(&self, col: usize, row: usize) -> f32 {
        self.depth[self.index(col, row)]
    }
}

/// Rasterizer output: full-precision depth plus the triangle seen at each pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct Rasterization {
    pub width: usize,
    pub height: usize,
    pub depth: Vec<f64>,
    triangle: Vec<u32>,
}

impl Rasterization {
    pub fn triangle_at(&self, pixel: usize) -> Option<usize> {
        match self.triangle[pixel] {
            NO_TRIANGLE => None,
            t => Some(t as usize),
        }
    }

    pub fn covered(&self, pixel: usize) -> bool {
        self.triangle[pixel] != NO_TRIANGLE
    }

    pub fn mask(&self) -> Vec<bool> {
        self.triangle.iter().map(|&t| t != NO_TRIANGLE).collect()
    }

    pub fn coverage(&self) -> usize {
        self.triangle.iter().filter(|&&t| t != NO_TRIANGLE).count()
    }

    pub fn to_frame(&self) -> DepthFrame {
        DepthFrame {
            width: self.width,
            height: self.height,
            depth: self.depth.iter().map(|&d| d as f32).collect(),
            mask: self.mask(),
        }
    }
}

fn edge(p: &[Vec2], a: usize, b: usize, x: f64, y: f64) -> f64 {
    let (lo, hi, sign) = if a < b { (a, b, 1.0) } else { (b, a, -1.0) };
    let (pa, pb) = (p[lo], p[hi]);
    sign * ((pb.x - pa.x) * (y - pa.y) - (pb.y - pa.y) * (x - pa.x))
}

fn owns_boundary(p: &[Vec2], a: usize, b: usize) -> bool {
    let d = p[b] - p[a];
    d.y > 0.0 || (d.y == 0.0 && d.x < 0.0)
}

/// Renders camera-frame vertices (mm) into a depth image.
pub fn rasterize(vertices: &[Vec3], triangles: &[[usize; 3]], k: &PinholeIntrinsics) -> Rasterization {
    let (w, h) = (k.width, k.height);
    let mut depth = vec![0.0; w * h];
    let mut tri_buf = vec![NO_TRIANGLE; w * h];
    let projected: Vec<Vec2> = vertices
        .iter()
        .map(|v| Vec2::new(k.fx * v.x / v.z + k.cx, k.fy * v.y / v.z + k.cy))
        .collect();
    for (t, tri) in triangles.iter().enumerate() {
        if tri.iter().any(|&v| !(vertices[v].z > NEAR_PLANE)) {
            continue;
        }
        let [a, mut b, mut c] = *tri;
        let mut area = edge(&projected, a, b, projected[c].x, projected[c].y);
        if area == 0.0 || !area.is_finite() {
            continue;
        }
        if area < 0.0 {
            std::mem::swap(&mut b, &mut c);
            area = -area;
        }
        let pts = [projected[a], projected[b], projected[c]];
        let min_x = pts.iter().map(|p| p.x).fold(f64::INFINITY, f64::min).ceil().max(0.0);
        let max_x = pts.iter().map(|p| p.x).fold(f64::NEG_INFINITY, f64::max).floor().min(w as f64 - 1.0);
        let min_y = pts.iter().map(|p| p.y).fold(f64::INFINITY, f64::min).ceil().max(0.0);
        let max_y = pts.iter().map(|p| p.y).fold(f64::NEG_INFINITY, f64::max).floor().min(h as f64 - 1.0);
        if min_x > max_x || min_y > max_y {
            continue;
        }
        // edge opposite each vertex
        let edges = [(b, c), (c, a), (a, b)];
        let owns = edges.map(|(u, v)| owns_boundary(&projected, u, v));
        let inv_z = [1.0 / vertices[a].z, 1.0 / vertices[b].z, 1.0 / vertices[c].z];
        for row in min_y as usize..=max_y as usize {
            let y = row as f64;
            for col in min_x as usize..=max_x as usize {
                let x = col as f64;
                let mut e = [0.0; 3];
                let mut inside = true;
                for i in 0..3 {
                    e[i] = edge(&projected, edges[i].0, edges[i].1, x, y);
                    if e[i] < 0.0 || (e[i] == 0.0 && !owns[i]) {
                        inside = false;
                        break;
                    }
                }
                if !inside {
                    continue;
                }
                let z = area / (e[0] * inv_z[0] + e[1] * inv_z[1] + e[2] * inv_z[2]);
                let idx = row * w + col;
                let cur = tri_buf[idx];
                if cur == NO_TRIANGLE || z < depth[idx] || (z == depth[idx] && (t as u32) < cur) {
                    depth[idx] = z;
                    tri_buf[idx] = t as u32;
                }
            }
        }
    }
    Rasterization {
        width: w,
        height: h,
        depth,
        triangle: tri_buf,
    }
}

/// Derivative of the depth seen through `pixel` with respect to the three
/// vertex positions of `tri`, holding the pixel-to-triangle assignment fixed.
pub fn pixel_depth_gradient(vertices: &[Vec3], tri: &[usize; 3], pixel: usize, k: &PinholeIntrinsics) -> [Vec3; 3] {
    let col = (pixel % k.width) as f64;
    let row = (pixel / k.width) as f64;
    let ray = Vec3::new((col - k.cx) / k.fx, (row - k.cy) / k.fy, 1.0);
    let v = [vertices[tri[0]], vertices[tri[1]], vertices[tri[2]]];
    let normal = v[0].cross(&v[1]) + v[1].cross(&v[2]) + v[2].cross(&v[0]);
    let num = v[0].dot(&v[1].cross(&v[2]));
    let den = normal.dot(&ray);
    let d = num / den;
    let mut out = [Vec3::zeros(); 3];
    for i in 0..3 {
        let (j, l) = ((i + 1) % 3, (i + 2) % 3);
        let d_num = v[j].cross(&v[l]);
        let d_den = (v[j] - v[l]).cross(&ray);
        out[i] = (d_num - d_den * d) / den;
    }
    out
}

/// Pulls per-pixel depth gradients back onto vertex positions. Pixels that
/// are not covered contribute nothing.
pub fn depth_vjp(
    raster: &Rasterization,
    vertices: &[Vec3],
    triangles: &[[usize; 3]],
    k: &PinholeIntrinsics,
    pixel_grads: &[(usize, f64)],
) -> Vec<Vec3> {
    let mut out = vec![Vec3::zeros(); vertices.len()];
    for &(pixel, g) in pixel_grads {
        if let Some(t) = raster.triangle_at(pixel) {
            let tri = &triangles[t];
            let grads = pixel_depth_gradient(vertices, tri, pixel, k);
            for i in 0..3 {
                out[tri[i]] += grads[i] * g;
            }
        }
    }
    out
}

/// Unit icosahedron refined `subdivisions` times and scaled to `radius`.
pub fn icosphere(center: &Vec3, radius: f64, subdivisions: usize) -> (Vec<Vec3>, Vec<[usize; 3]>) {
    let t = (1.0 + 5f64.sqrt()) / 2.0;
    let mut verts: Vec<Vec3> = [
        (-1.0, t, 0.0),
        (1.0, t, 0.0),
        (-1.0, -t, 0.0),
        (1.0, -t, 0.0),
        (0.0, -1.0, t),
        (0.0, 1.0, t),
        (0.0, -1.0, -t),
        (0.0, 1.0, -t),
        (t, 0.0, -1.0),
        (t, 0.0, 1.0),
        (-t, 0.0, -1.0),
        (-t, 0.0, 1.0),
    ]
    .iter()
    .map(|&(x, y, z)| Vec3::new(x, y, z).normalize())
    .collect();
    let mut faces: Vec<[usize; 3]> = vec![
        [0, 11, 5],
        [0, 5, 1],
        [0, 1, 7],
        [0, 7, 10],
        [0, 10, 11],
        [1, 5, 9],
        [5, 11, 4],
        [11, 10, 2],
        [10, 7, 6],
        [7, 1, 8],
        [3, 9, 4],
        [3, 4, 2],
        [3, 2, 6],
        [3, 6, 8],
        [3, 8, 9],
        [4, 9, 5],
        [2, 4, 11],
        [6, 2, 10],
        [8, 6, 7],
        [9, 8, 1],
    ];
    for _ in 0..subdivisions {
        let mut cache = std::collections::HashMap::new();
        let mut midpoint = |a: usize, b: usize, verts: &mut Vec<Vec3>| {
            *cache.entry((a.min(b), a.max(b))).or_insert_with(|| {
                verts.push(((verts[a] + verts[b]) * 0.5).normalize());
                verts.len() - 1
            })
        };
        let mut next = Vec::with_capacity(faces.len() * 4);
        for [a, b, c] in faces {
            let ab = midpoint(a, b, &mut verts);
            let bc = midpoint(b, c, &mut verts);
            let ca = midpoint(c, a, &mut verts);
            next.extend([[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]]);
        }
        faces = next;
    }
    (verts.into_iter().map(|v| center + v * radius).collect(), faces)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn k() -> PinholeIntrinsics {
        PinholeIntrinsics::default()
    }

    /// Fronto-parallel quad spanning pixel rectangle `[x0,x1]x[y0,y1]` at depth z.
    fn quad(x0: f64, y0: f64, x1: f64, y1: f64, z: f64, base: usize) -> (Vec<Vec3>, Vec<[usize; 3]>) {
        let k = k();
        let un = |x: f64, y: f64| Vec3::new((x - k.cx) * z / k.fx, (y - k.cy) * z / k.fy, z);
        (
            vec![un(x0, y0), un(x1, y0), un(x1, y1), un(x0, y1)],
            vec![[base, base + 1, base + 2], [base, base + 2, base + 3]],
        )
    }

    #[test]
    fn fronto_parallel_triangle_constant_depth() {
        let (v, _) = quad(100.0, 80.0, 200.0, 160.0, 1000.0, 0);
        let r = rasterize(&v, &[[0, 1, 2]], &k());
        assert!(r.coverage() > 0);
        for i in 0..r.depth.len() {
            if r.covered(i) {
                assert!((r.depth[i] - 1000.0).abs() < 1e-9);
            } else {
                assert_eq!(r.depth[i], 0.0);
            }
        }
    }

    #[test]
    fn z_buffer_keeps_nearest() {
        let (mut v, mut t) = quad(50.3, 40.3, 150.7, 140.7, 1200.0, 0);
        let (v2, t2) = quad(100.3, 90.3, 200.7, 190.7, 800.0, 4);
        v.extend(v2);
        t.extend(t2);
        let r = rasterize(&v, &t, &k());
        let idx = 120 * 320 + 120;
        assert!((r.depth[idx] - 800.0).abs() < 1e-9);
        let far_only = 60 * 320 + 60;
        assert!((r.depth[far_only] - 1200.0).abs() < 1e-9);
    }

    #[test]
    fn sphere_centre_depth_within_sagitta() {
        let (v, t) = icosphere(&Vec3::new(0.0, 0.0, 1000.0), 100.0, 3);
        let r = rasterize(&v, &t, &k());
        let d = r.depth[120 * 320 + 160];
        // largest facet edge bounds the chord; sagitta = R - sqrt(R^2 - (e/2)^2)
        let edge_len = t
            .iter()
            .flat_map(|f| (0..3).map(move |i| (f[i], f[(i + 1) % 3])))
            .map(|(a, b)| (v[a] - v[b]).norm())
            .fold(0.0, f64::max);
        let sagitta = 100.0 - (100.0f64.powi(2) - (edge_len / 2.0).powi(2)).sqrt();
        assert!(d >= 900.0 && d <= 900.0 + sagitta, "depth {d} sagitta {sagitta}");
    }

    #[test]
    fn rectangle_area_matches_projection() {
        let (v, t) = quad(20.5, 30.5, 120.5, 90.5, 1500.0, 0);
        let r = rasterize(&v, &t, &k());
        // pixel centres strictly inside: cols 21..=120, rows 31..=90
        assert_eq!(r.coverage(), 100 * 60);
        let (v, t) = quad(20.2, 30.7, 121.9, 90.1, 1500.0, 0);
        let r = rasterize(&v, &t, &k());
        let analytic = (121.9 - 20.2) * (90.1 - 30.7);
        let band = 2.0 * ((121.9 - 20.2) + (90.1 - 30.7)) + 4.0;
        assert!((r.coverage() as f64 - analytic).abs() <= band);
    }

    #[test]
    fn shared_edges_are_drawn_once() {
        // fan around a centre that lands exactly on a pixel centre
        let k = k();
        let z = 1000.0;
        let un = |x: f64, y: f64| Vec3::new((x - k.cx) * z / k.fx, (y - k.cy) * z / k.fy, z);
        let mut v = vec![un(100.0, 100.0)];
        let n = 12;
        for i in 0..n {
            let a = 2.0 * std::f64::consts::PI * i as f64 / n as f64;
            v.push(un(100.0 + 20.0 * a.cos(), 100.0 + 20.0 * a.sin()));
        }
        let tris: Vec<[usize; 3]> = (0..n).map(|i| [0, 1 + i, 1 + (i + 1) % n]).collect();
        let mut counts = vec![0u32; k.width * k.height];
        for tri in &tris {
            let r = rasterize(&v, &[*tri], &k);
            for (i, c) in counts.iter_mut().enumerate() {
                *c += r.covered(i) as u32;
            }
        }
        assert!(counts.iter().all(|&c| c <= 1));
        assert_eq!(counts[100 * 320 + 100], 1);
        // also a split square: diagonal pixels belong to exactly one half
        let (v, t) = quad(10.0, 10.0, 30.0, 30.0, 1000.0, 0);
        let a = rasterize(&v, &t[..1], &k);
        let b = rasterize(&v, &t[1..], &k);
        for i in 0..a.depth.len() {
            assert!(!(a.covered(i) && b.covered(i)));
        }
    }

    #[test]
    fn vertices_behind_camera_are_clipped() {
        let v = vec![Vec3::new(0.0, 0.0, -10.0), Vec3::new(100.0, 0.0, 500.0), Vec3::new(0.0, 100.0, 500.0)];
        assert_eq!(rasterize(&v, &[[0, 1, 2]], &k()).coverage(), 0);
    }

    #[test]
    fn degenerate_triangle_is_skipped() {
        let v = vec![Vec3::new(0.0, 0.0, 500.0), Vec3::new(10.0, 0.0, 500.0), Vec3::new(20.0, 0.0, 500.0)];
        assert_eq!(rasterize(&v, &[[0, 1, 2]], &k()).coverage(), 0);
    }

    #[test]
    fn fronto_parallel_gradient_is_barycentric() {
        let k = k();
        let z = 1000.0;
        let un = |x: f64, y: f64| Vec3::new((x - k.cx) * z / k.fx, (y - k.cy) * z / k.fy, z);
        let v = vec![un(100.0, 100.0), un(130.0, 100.0), un(100.0, 130.0)];
        let pixel = 110 * 320 + 110;
        let g = pixel_depth_gradient(&v, &[0, 1, 2], pixel, &k);
        let bary = [1.0 - 10.0 / 30.0 - 10.0 / 30.0, 10.0 / 30.0, 10.0 / 30.0];
        for i in 0..3 {
            assert!((g[i].z - bary[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn uncovered_pixels_have_no_gradient() {
        let (v, t) = quad(10.0, 10.0, 30.0, 30.0, 1000.0, 0);
        let r = rasterize(&v, &t, &k());
        let g = depth_vjp(&r, &v, &t, &k(), &[(200 * 320 + 200, 1.0)]);
        assert!(g.iter().all(|x| *x == Vec3::zeros()));
    }

    #[test]
    fn gradient_matches_rerendered_differences() {
        let (mut v, t) = icosphere(&Vec3::new(30.0, -20.0, 900.0), 120.0, 2);
        // break the symmetry so facets are not all alike
        for (i, p) in v.iter_mut().enumerate() {
            p.z += 7.0 * ((i * 37 % 11) as f64 - 5.0);
        }
        let k = k();
        let base = rasterize(&v, &t, &k);
        let h = 1e-4;
        let mut checked = 0;
        for pixel in (0..base.depth.len()).step_by(97) {
            let Some(tri) = base.triangle_at(pixel) else { continue };
            let g = pixel_depth_gradient(&v, &t[tri], pixel, &k);
            for (slot, &vi) in t[tri].iter().enumerate() {
                for axis in 0..3 {
                    let mut vp = v.clone();
                    let mut vm = v.clone();
                    vp[vi][axis] += h;
                    vm[vi][axis] -= h;
                    let rp = rasterize(&vp, &t, &k);
                    let rm = rasterize(&vm, &t, &k);
                    if rp.triangle_at(pixel) != Some(tri) || rm.triangle_at(pixel) != Some(tri) {
                        continue;
                    }
                    let fd = (rp.depth[pixel] - rm.depth[pixel]) / (2.0 * h);
                    let scale = fd.abs().max(g[slot][axis].abs()).max(1e-3);
                    assert!((fd - g[slot][axis]).abs() / scale < 1e-3, "fd {fd} analytic {}", g[slot][axis]);
                    checked += 1;
                }
            }
        }
        assert!(checked > 50);
    }

    #[test]
    fn deterministic_and_order_invariant() {
        let (v, t) = icosphere(&Vec3::new(0.0, 0.0, 800.0), 150.0, 2);
        let a = rasterize(&v, &t, &k());
        let b = rasterize(&v, &t, &k());
        assert_eq!(a, b);
        let mut rev = t.clone();
        rev.reverse();
        let c = rasterize(&v, &rev, &k());
        assert_eq!(a.depth, c.depth);
        assert_eq!(a.mask(), c.mask());
    }

    proptest! {
        #[test]
        fn occlusion_is_elementwise_min(
            z1 in 500.0..3000.0f64, z2 in 500.0..3000.0f64,
            o1 in prop::array::uniform2(0.0..200.0f64), o2 in prop::array::uniform2(0.0..200.0f64),
        ) {
            let (va, ta) = icosphere(&Vec3::new(o1[0] - 100.0, o1[1] - 100.0, z1), 150.0, 1);
            let (mut vb, mut tb) = quad(o2[0], o2[1], o2[0] + 90.0, o2[1] + 70.0, z2, 0);
            let ra = rasterize(&va, &ta, &k());
            let rb = rasterize(&vb, &tb, &k());
            let n = va.len();
            let mut v = va.clone();
            v.append(&mut vb);
            let mut t = ta.clone();
            for tri in tb.iter_mut() {
                *tri = tri.map(|i| i + n);
            }
            t.append(&mut tb);
            let both = rasterize(&v, &t, &k());
            for i in 0..both.depth.len() {
                let expected = match (ra.covered(i), rb.covered(i)) {
                    (true, true) => ra.depth[i].min(rb.depth[i]),
                    (true, false) => ra.depth[i],
                    (false, true) => rb.depth[i],
                    (false, false) => 0.0,
                };
                prop_assert_eq!(both.depth[i], expected);
            }
        }
    }
}
