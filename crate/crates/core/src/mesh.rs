//! Triangle meshes used as shape priors, with all-hit ray casting and
//! face/barycentric surface addressing.

use std::fmt::Write as _;
use std::path::Path;

use thiserror::Error;

use crate::geometry::{Ray, Vec3};

/// Hits closer than this to the ray origin are ignored.
pub const MIN_HIT_DEPTH: f64 = 1e-9;
/// Hits whose depths differ by at most this are the same crossing.
pub const DEPTH_TIE: f64 = 1e-12;
/// Meshes with more faces than this get a bounding-volume hierarchy.
pub const BVH_FACE_THRESHOLD: usize = 1000;

const MIN_FACE_AREA: f64 = 1e-12;
const BARY_SLACK: f64 = 1e-12;
const LEAF_SIZE: usize = 4;

#[derive(Debug, Error)]
pub enum MeshError {
    #[error("face {face} references vertex {index} but mesh has {count} vertices")]
    IndexOutOfRange {
        face: usize,
        index: usize,
        count: usize,
    },
    #[error("face {0} is degenerate (area below 1e-12)")]
    DegenerateFace(usize),
    #[error("invalid surface coordinate: {0}")]
    InvalidCoordinate(String),
    #[error("mesh parse error at line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Face index plus barycentric weights on that face.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SurfaceCoordinate {
    pub face: usize,
    pub bary: [f64; 3],
}

impl SurfaceCoordinate {
    pub fn new(face: usize, bary: [f64; 3]) -> Result<Self, MeshError> {
        let c = Self { face, bary };
        c.check_weights()?;
        Ok(c)
    }

    fn check_weights(&self) -> Result<(), MeshError> {
        if self.bary.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(MeshError::InvalidCoordinate(format!(
                "negative or non-finite weight in {:?}",
                self.bary
            )));
        }
        let sum: f64 = self.bary.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(MeshError::InvalidCoordinate(format!(
                "weights sum to {sum}"
            )));
        }
        Ok(())
    }
}

/// A ray crossing of the mesh surface.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SurfaceHit {
    pub depth: f64,
    pub coord: SurfaceCoordinate,
    pub point: Vec3,
}

#[derive(Debug, Clone)]
pub struct TriangleMesh {
    vertices: Vec<Vec3>,
    faces: Vec<[usize; 3]>,
    bvh: Option<Bvh>,
}

impl TriangleMesh {
    pub fn new(vertices: Vec<Vec3>, faces: Vec<[usize; 3]>) -> Result<Self, MeshError> {
        let count = vertices.len();
        for (f, face) in faces.iter().enumerate() {
            for &index in face {
                if index >= count {
                    return Err(MeshError::IndexOutOfRange { face: f, index, count });
                }
            }
            let [a, b, c] = face.map(|i| vertices[i]);
            if 0.5 * (b - a).cross(&(c - a)).norm() <= MIN_FACE_AREA {
                return Err(MeshError::DegenerateFace(f));
            }
        }
        let bvh = (faces.len() > BVH_FACE_THRESHOLD).then(|| Bvh::build(&vertices, &faces));
        Ok(Self {
            vertices,
            faces,
            bvh,
        })
    }

    pub fn vertices(&self) -> &[Vec3] {
        &self.vertices
    }

    pub fn faces(&self) -> &[[usize; 3]] {
        &self.faces
    }

    pub fn has_index(&self) -> bool {
        self.bvh.is_some()
    }

    pub fn face_vertices(&self, face: usize) -> [Vec3; 3] {
        self.faces[face].map(|i| self.vertices[i])
    }

    pub fn face_area(&self, face: usize) -> f64 {
        let [a, b, c] = self.face_vertices(face);
        0.5 * (b - a).cross(&(c - a)).norm()
    }

    /// Same face list, vertices mapped through `f`.
    pub fn map_vertices(&self, f: impl Fn(&Vec3) -> Vec3) -> Result<Self, MeshError> {
        Self::new(self.vertices.iter().map(f).collect(), self.faces.clone())
    }

    pub fn same_topology(&self, other: &TriangleMesh) -> bool {
        self.vertices.len() == other.vertices.len() && self.faces == other.faces
    }

    pub fn centroid(&self) -> Vec3 {
        let sum: Vec3 = self.vertices.iter().sum();
        sum / self.vertices.len().max(1) as f64
    }

    pub fn check_coordinate(&self, c: &SurfaceCoordinate) -> Result<(), MeshError> {
        if c.face >= self.faces.len() {
            return Err(MeshError::InvalidCoordinate(format!(
                "face {} out of range ({} faces)",
                c.face,
                self.faces.len()
            )));
        }
        c.check_weights()
    }

    /// Intersections of the ray with every face, without the spatial index.
    pub fn hits_brute_force(&self, ray: &Ray) -> Vec<SurfaceHit> {
        let raw = (0..self.faces.len())
            .filter_map(|f| self.intersect_face(f, ray))
            .collect();
        finalize_hits(raw)
    }

    fn intersect_face(&self, face: usize, ray: &Ray) -> Option<SurfaceHit> {
        let [v0, v1, v2] = self.face_vertices(face);
        let d = ray.direction();
        let e1 = v1 - v0;
        let e2 = v2 - v0;
        let p = d.cross(&e2);
        let det = e1.dot(&p);
        if det.abs() <= 1e-15 * e1.norm() * e2.norm() {
            return None;
        }
        let inv = 1.0 / det;
        let s = ray.origin() - v0;
        let u = s.dot(&p) * inv;
        if !(-BARY_SLACK..=1.0 + BARY_SLACK).contains(&u) {
            return None;
        }
        let q = s.cross(&e1);
        let v = d.dot(&q) * inv;
        if v < -BARY_SLACK || u + v > 1.0 + BARY_SLACK {
            return None;
        }
        let depth = e2.dot(&q) * inv;
        if depth <= MIN_HIT_DEPTH {
            return None;
        }
        let u = u.max(0.0);
        let v = v.max(0.0);
        let w0 = (1.0 - u - v).max(0.0);
        let sum = w0 + u + v;
        let bary = [w0 / sum, u / sum, v / sum];
        let point = v0 * bary[0] + v1 * bary[1] + v2 * bary[2];
        Some(SurfaceHit {
            depth,
            coord: SurfaceCoordinate { face, bary },
            point,
        })
    }
}

fn finalize_hits(mut raw: Vec<SurfaceHit>) -> Vec<SurfaceHit> {
    raw.sort_by(|a, b| {
        a.depth
            .total_cmp(&b.depth)
            .then(a.coord.face.cmp(&b.coord.face))
    });
    let mut out: Vec<SurfaceHit> = Vec::with_capacity(raw.len());
    let mut group_start = f64::NEG_INFINITY;
    for hit in raw {
        if hit.depth - group_start <= DEPTH_TIE {
            // Same crossing through a shared edge or vertex: keep the lowest face.
            let last = out.last_mut().expect("group has a representative");
            if hit.coord.face < last.coord.face {
                *last = hit;
            }
            continue;
        }
        group_start = hit.depth;
        out.push(hit);
    }
    out
}

/// All crossings of `ray` with the mesh, ascending in depth.
pub fn ray_mesh_all_hits(mesh: &TriangleMesh, ray: &Ray) -> Vec<SurfaceHit> {
    match &mesh.bvh {
        Some(bvh) => {
            let mut raw = Vec::new();
            bvh.visit(ray, |face| {
                if let Some(h) = mesh.intersect_face(face, ray) {
                    raw.push(h);
                }
            });
            finalize_hits(raw)
        }
        None => mesh.hits_brute_force(ray),
    }
}

pub fn first_hit(mesh: &TriangleMesh, ray: &Ray) -> Option<SurfaceHit> {
    ray_mesh_all_hits(mesh, ray).into_iter().next()
}

pub fn surface_point(mesh: &TriangleMesh, c: &SurfaceCoordinate) -> Result<Vec3, MeshError> {
    mesh.check_coordinate(c)?;
    let [a, b, d] = mesh.face_vertices(c.face);
    Ok(a * c.bary[0] + b * c.bary[1] + d * c.bary[2])
}

/// Euclidean distance between two surface coordinates on `mesh`.
pub fn surface_distance(
    mesh: &TriangleMesh,
    a: &SurfaceCoordinate,
    b: &SurfaceCoordinate,
) -> Result<f64, MeshError> {
    Ok((surface_point(mesh, a)? - surface_point(mesh, b)?).norm())
}

#[derive(Debug, Clone, Copy)]
struct Aabb {
    min: Vec3,
    max: Vec3,
}

impl Aabb {
    fn empty() -> Self {
        Self {
            min: Vec3::repeat(f64::INFINITY),
            max: Vec3::repeat(f64::NEG_INFINITY),
        }
    }

    fn grow(&mut self, p: &Vec3) {
        self.min = self.min.inf(p);
        self.max = self.max.sup(p);
    }

    fn longest_axis(&self) -> usize {
        (self.max - self.min).imax()
    }

    fn hit_by(&self, origin: &Vec3, inv_dir: &Vec3) -> bool {
        let mut t_min: f64 = 0.0;
        let mut t_max = f64::INFINITY;
        for axis in 0..3 {
            let t0 = (self.min[axis] - origin[axis]) * inv_dir[axis];
            let t1 = (self.max[axis] - origin[axis]) * inv_dir[axis];
            let (lo, hi) = if t0 <= t1 { (t0, t1) } else { (t1, t0) };
            // NaN arises for a zero direction component with the origin on a slab plane.
            if !lo.is_nan() {
                t_min = t_min.max(lo);
            }
            if !hi.is_nan() {
                t_max = t_max.min(hi);
            }
        }
        t_min <= t_max * (1.0 + 1e-12) + 1e-12
    }
}

#[derive(Debug, Clone)]
enum Node {
    Leaf { bounds: Aabb, start: usize, len: usize },
    Inner { bounds: Aabb, left: usize, right: usize },
}

/// Median-split bounding-volume hierarchy over face indices.
#[derive(Debug, Clone)]
struct Bvh {
    nodes: Vec<Node>,
    order: Vec<usize>,
}

impl Bvh {
    fn build(vertices: &[Vec3], faces: &[[usize; 3]]) -> Self {
        let centroids: Vec<Vec3> = faces
            .iter()
            .map(|f| (vertices[f[0]] + vertices[f[1]] + vertices[f[2]]) / 3.0)
            .collect();
        let mut bvh = Bvh {
            nodes: Vec::new(),
            order: (0..faces.len()).collect(),
        };
        bvh.build_node(vertices, faces, &centroids, 0, faces.len());
        bvh
    }

    fn build_node(
        &mut self,
        vertices: &[Vec3],
        faces: &[[usize; 3]],
        centroids: &[Vec3],
        start: usize,
        end: usize,
    ) -> usize {
        let mut bounds = Aabb::empty();
        let mut centroid_bounds = Aabb::empty();
        for &f in &self.order[start..end] {
            for &v in &faces[f] {
                bounds.grow(&vertices[v]);
            }
            centroid_bounds.grow(&centroids[f]);
        }
        let id = self.nodes.len();
        if end - start <= LEAF_SIZE {
            self.nodes.push(Node::Leaf {
                bounds,
                start,
                len: end - start,
            });
            return id;
        }
        let axis = centroid_bounds.longest_axis();
        let mid = start + (end - start) / 2;
        self.order[start..end].select_nth_unstable_by(mid - start, |&a, &b| {
            centroids[a][axis]
                .total_cmp(&centroids[b][axis])
                .then(a.cmp(&b))
        });
        self.nodes.push(Node::Leaf {
            bounds,
            start,
            len: 0,
        });
        let left = self.build_node(vertices, faces, centroids, start, mid);
        let right = self.build_node(vertices, faces, centroids, mid, end);
        self.nodes[id] = Node::Inner {
            bounds,
            left,
            right,
        };
        id
    }

    fn visit(&self, ray: &Ray, mut f: impl FnMut(usize)) {
        let origin = ray.origin();
        let inv_dir = ray.direction().map(|d| 1.0 / d);
        let mut stack = vec![0usize];
        while let Some(id) = stack.pop() {
            match &self.nodes[id] {
                Node::Leaf { bounds, start, len } => {
                    if bounds.hit_by(origin, &inv_dir) {
                        self.order[*start..start + len].iter().for_each(|&face| f(face));
                    }
                }
                Node::Inner {
                    bounds,
                    left,
                    right,
                } => {
                    if bounds.hit_by(origin, &inv_dir) {
                        stack.push(*right);
                        stack.push(*left);
                    }
                }
            }
        }
    }
}

/// Parses `v x y z` / `f i j k` lines (1-based indices). Other lines are ignored.
pub fn parse_mesh(text: &str) -> Result<TriangleMesh, MeshError> {
    let mut vertices = Vec::new();
    let mut faces = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line_no = n + 1;
        let mut parts = line.split_whitespace();
        let err = |message: String| MeshError::Parse {
            line: line_no,
            message,
        };
        match parts.next() {
            Some("v") => {
                let xyz: Vec<f64> = parts
                    .take(3)
                    .map(|s| s.parse::<f64>().map_err(|e| err(format!("bad vertex `{s}`: {e}"))))
                    .collect::<Result<_, _>>()?;
                if xyz.len() != 3 {
                    return Err(err("vertex needs three coordinates".into()));
                }
                vertices.push(Vec3::new(xyz[0], xyz[1], xyz[2]));
            }
            Some("f") => {
                let idx: Vec<usize> = parts
                    .map(|s| {
                        // Accept `i/t/n` forms, keeping the position index.
                        let head = s.split('/').next().unwrap_or(s);
                        head.parse::<usize>()
                            .ok()
                            .filter(|&i| i >= 1)
                            .map(|i| i - 1)
                            .ok_or_else(|| err(format!("bad face index `{s}`")))
                    })
                    .collect::<Result<_, _>>()?;
                if idx.len() != 3 {
                    return Err(err(format!("only triangles are supported, got {} indices", idx.len())));
                }
                faces.push([idx[0], idx[1], idx[2]]);
            }
            _ => {}
        }
    }
    TriangleMesh::new(vertices, faces)
}

pub fn load_mesh(path: impl AsRef<Path>) -> Result<TriangleMesh, MeshError> {
    parse_mesh(&std::fs::read_to_string(path)?)
}

pub fn format_mesh(mesh: &TriangleMesh) -> String {
    let mut out = String::from("# vcsfm-mesh v1\n");
    for v in &mesh.vertices {
        let _ = writeln!(out, "v {} {} {}", v.x, v.y, v.z);
    }
    for f in &mesh.faces {
        let _ = writeln!(out, "f {} {} {}", f[0] + 1, f[1] + 1, f[2] + 1);
    }
    out
}

/// Unit square in the `z = 0` plane, two triangles.
pub fn unit_square() -> TriangleMesh {
    TriangleMesh::new(
        vec![
            Vec3::new(0.0, 0.0, 0.0),
            Vec3::new(1.0, 0.0, 0.0),
            Vec3::new(1.0, 1.0, 0.0),
            Vec3::new(0.0, 1.0, 0.0),
        ],
        vec![[0, 1, 2], [0, 2, 3]],
    )
    .expect("valid square")
}

/// Axis-aligned cube `[0, 1]³` with outward-facing triangles.
pub fn unit_cube() -> TriangleMesh {
    let v = (0..8)
        .map(|i| Vec3::new((i & 1) as f64, ((i >> 1) & 1) as f64, ((i >> 2) & 1) as f64))
        .collect();
    let faces = vec![
        [0, 2, 1], [1, 2, 3], // z = 0
        [4, 5, 6], [5, 7, 6], // z = 1
        [0, 1, 4], [1, 5, 4], // y = 0
        [2, 6, 3], [3, 6, 7], // y = 1
        [0, 4, 2], [2, 4, 6], // x = 0
        [1, 3, 5], [3, 7, 5], // x = 1
    ];
    TriangleMesh::new(v, faces).expect("valid cube")
}

/// Subdivided icosahedron projected onto a sphere.
pub fn icosphere(center: Vec3, radius: f64, subdivisions: usize) -> TriangleMesh {
    let t = (1.0 + 5f64.sqrt()) / 2.0;
    let mut verts: Vec<Vec3> = [
        (-1.0, t, 0.0), (1.0, t, 0.0), (-1.0, -t, 0.0), (1.0, -t, 0.0),
        (0.0, -1.0, t), (0.0, 1.0, t), (0.0, -1.0, -t), (0.0, 1.0, -t),
        (t, 0.0, -1.0), (t, 0.0, 1.0), (-t, 0.0, -1.0), (-t, 0.0, 1.0),
    ]
    .iter()
    .map(|&(x, y, z)| Vec3::new(x, y, z).normalize())
    .collect();
    let mut faces: Vec<[usize; 3]> = vec![
        [0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
        [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
        [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
        [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1],
    ];
    for _ in 0..subdivisions {
        let mut cache = std::collections::HashMap::new();
        let mut midpoint = |a: usize, b: usize, verts: &mut Vec<Vec3>| -> usize {
            let key = (a.min(b), a.max(b));
            *cache.entry(key).or_insert_with(|| {
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
    let verts = verts.into_iter().map(|v| center + v * radius).collect();
    TriangleMesh::new(verts, faces).expect("valid icosphere")
}
