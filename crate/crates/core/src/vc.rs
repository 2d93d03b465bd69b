//! Virtual-correspondence extraction.
//!
//! Each sampled pixel of one image casts its ray through that image's posed
//! prior mesh and records every crossing. A crossing is matched to the
//! pixel of the other image whose dense surface map points at the same
//! surface location. Both directions are run and unioned.

use std::collections::HashMap;

use rayon::prelude::*;
use thiserror::Error;

use crate::geometry::{project, ray_through_pixel, CameraIntrinsics, Pixel, Ray, Se3Pose, Vec3};
use crate::mesh::{
    ray_mesh_all_hits, surface_point, MeshError, SurfaceCoordinate, SurfaceHit, TriangleMesh,
};

#[derive(Debug, Error)]
pub enum VcError {
    #[error("subject `{0}` has different mesh topology in the two images")]
    TopologyMismatch(String),
    #[error("surface map is {got:?} but image expects {want:?}")]
    MapSize {
        got: (usize, usize),
        want: (usize, usize),
    },
    #[error(transparent)]
    Mesh(#[from] MeshError),
}

/// Per-pixel surface coordinates, row-major. Pixel `(u, v)` is centered at
/// continuous coordinates `(u, v)`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseSurfaceMap {
    width: usize,
    height: usize,
    entries: Vec<Option<SurfaceCoordinate>>,
}

impl DenseSurfaceMap {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            entries: vec![None; width * height],
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn get(&self, u: usize, v: usize) -> Option<&SurfaceCoordinate> {
        if u >= self.width || v >= self.height {
            return None;
        }
        self.entries[v * self.width + u].as_ref()
    }

    /// Panics when `(u, v)` is outside the map.
    pub fn set(&mut self, u: usize, v: usize, c: Option<SurfaceCoordinate>) {
        assert!(u < self.width && v < self.height, "pixel ({u}, {v}) outside map");
        self.entries[v * self.width + u] = c;
    }

    /// Mapped pixels in row-major order.
    pub fn mapped(&self) -> impl Iterator<Item = (usize, usize, &SurfaceCoordinate)> + '_ {
        self.entries.iter().enumerate().filter_map(move |(i, c)| {
            c.as_ref().map(|c| (i % self.width, i / self.width, c))
        })
    }

    pub fn mapped_count(&self) -> usize {
        self.entries.iter().filter(|c| c.is_some()).count()
    }

    pub fn validate(&self, mesh: &TriangleMesh) -> Result<(), MeshError> {
        self.mapped().try_for_each(|(_, _, c)| mesh.check_coordinate(c))
    }
}

/// One person's prior in one image: a posed mesh and its dense surface map.
#[derive(Debug, Clone)]
pub struct SubjectPrior {
    pub person: String,
    pub surface_map: DenseSurfaceMap,
    pub mesh: TriangleMesh,
    /// Camera-from-prior transform; identity when the mesh is already in the camera frame.
    pub camera_from_prior: Se3Pose,
}

impl SubjectPrior {
    pub fn new(person: impl Into<String>, surface_map: DenseSurfaceMap, mesh: TriangleMesh) -> Self {
        Self {
            person: person.into(),
            surface_map,
            mesh,
            camera_from_prior: Se3Pose::identity(),
        }
    }

    /// Hits of a camera-frame ray, with points reported in the camera frame.
    pub fn cast(&self, ray: &Ray) -> Vec<SurfaceHit> {
        if self.camera_from_prior == Se3Pose::identity() {
            return ray_mesh_all_hits(&self.mesh, ray);
        }
        let prior_from_camera = self.camera_from_prior.inverse();
        let local = Ray::new(
            prior_from_camera.transform(ray.origin()),
            prior_from_camera.rotation() * ray.direction(),
        )
        .expect("rigid transform keeps unit direction");
        ray_mesh_all_hits(&self.mesh, &local)
            .into_iter()
            .map(|mut h| {
                h.point = self.camera_from_prior.transform(&h.point);
                h
            })
            .collect()
    }

    /// Camera-frame position of a surface coordinate on this prior.
    pub fn camera_point(&self, c: &SurfaceCoordinate) -> Result<Vec3, MeshError> {
        Ok(self.camera_from_prior.transform(&surface_point(&self.mesh, c)?))
    }
}

#[derive(Debug, Clone)]
pub struct ImageRecord {
    pub id: String,
    pub intrinsics: CameraIntrinsics,
    pub width: usize,
    pub height: usize,
    pub subjects: Vec<SubjectPrior>,
}

impl ImageRecord {
    pub fn new(
        id: impl Into<String>,
        intrinsics: CameraIntrinsics,
        width: usize,
        height: usize,
        subjects: Vec<SubjectPrior>,
    ) -> Result<Self, VcError> {
        let record = Self {
            id: id.into(),
            intrinsics,
            width,
            height,
            subjects,
        };
        record.validate()?;
        Ok(record)
    }

    pub fn validate(&self) -> Result<(), VcError> {
        for s in &self.subjects {
            let got = (s.surface_map.width, s.surface_map.height);
            if got != (self.width, self.height) {
                return Err(VcError::MapSize {
                    got,
                    want: (self.width, self.height),
                });
            }
            s.surface_map.validate(&s.mesh)?;
        }
        Ok(())
    }

    pub fn subject(&self, person: &str) -> Option<&SubjectPrior> {
        self.subjects.iter().find(|s| s.person == person)
    }

    /// Camera-frame ray through a pixel.
    pub fn camera_ray(&self, p: Pixel) -> Ray {
        ray_through_pixel(&Se3Pose::identity(), &self.intrinsics, p)
    }

    /// Nearest crossing of the pixel ray with any subject prior, camera frame.
    pub fn first_prior_hit(&self, p: Pixel) -> Option<SurfaceHit> {
        let ray = self.camera_ray(p);
        self.subjects
            .iter()
            .filter_map(|s| s.cast(&ray).into_iter().next())
            .min_by(|a, b| a.depth.total_cmp(&b.depth))
    }
}

/// Which image cast the ray that produced a correspondence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum VcSource {
    A,
    B,
}

impl VcSource {
    pub fn swapped(self) -> Self {
        match self {
            VcSource::A => VcSource::B,
            VcSource::B => VcSource::A,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VirtualCorrespondence {
    pub pixel_a: Pixel,
    pub pixel_b: Pixel,
    /// Surface point pierced by the source image's ray and seen by the other image.
    pub coord: Option<SurfaceCoordinate>,
    /// Index of that crossing along the source ray; 0 means the source sees it too.
    pub hit_rank: usize,
    pub source: VcSource,
}

impl VirtualCorrespondence {
    /// The same correspondence with the roles of the two images exchanged.
    pub fn swapped(&self) -> Self {
        Self {
            pixel_a: self.pixel_b,
            pixel_b: self.pixel_a,
            coord: self.coord,
            hit_rank: self.hit_rank,
            source: self.source.swapped(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ExtractionParams {
    /// Sample every `stride`-th pixel along each axis of the casting image.
    pub stride: usize,
    /// Surface-match tolerance τ_s in canonical mesh units.
    pub match_tolerance: f64,
    /// Crossings considered along each ray, nearest first.
    pub max_hits_per_pixel: usize,
    /// Move the casting pixel to the exact projection of the matched surface point.
    pub subpixel: bool,
    /// Mesh on which surface distances are measured. Defaults to the observing image's prior.
    pub canonical: Option<TriangleMesh>,
    /// Observer map entries need this many 8-neighbours whose surface points
    /// lie within `coherence_radius`; isolated entries are dropped before
    /// matching. 0 keeps every entry.
    pub min_neighbor_support: usize,
    pub coherence_radius: f64,
}

impl Default for ExtractionParams {
    fn default() -> Self {
        Self {
            stride: 4,
            match_tolerance: 0.01,
            max_hits_per_pixel: 4,
            subpixel: true,
            canonical: None,
            min_neighbor_support: 2,
            coherence_radius: 0.05,
        }
    }
}

/// Copy of `map` without entries that disagree with their image neighbours:
/// an entry survives when at least `min_support` of its 8-neighbours map to
/// surface points within `radius` of its own.
pub fn drop_incoherent(
    map: &DenseSurfaceMap,
    mesh: &TriangleMesh,
    radius: f64,
    min_support: usize,
) -> Result<DenseSurfaceMap, MeshError> {
    let (w, h) = (map.width(), map.height());
    let mut points: Vec<Option<Vec3>> = vec![None; w * h];
    for (u, v, c) in map.mapped() {
        points[v * w + u] = Some(surface_point(mesh, c)?);
    }
    let mut out = DenseSurfaceMap::new(w, h);
    for (u, v, c) in map.mapped() {
        let p = points[v * w + u].expect("mapped");
        let mut support = 0;
        for dv in -1i64..=1 {
            for du in -1i64..=1 {
                let (nu, nv) = (u as i64 + du, v as i64 + dv);
                if (du, dv) == (0, 0) || nu < 0 || nv < 0 || nu >= w as i64 || nv >= h as i64 {
                    continue;
                }
                if let Some(q) = points[nv as usize * w + nu as usize] {
                    if (q - p).norm() <= radius {
                        support += 1;
                    }
                }
            }
        }
        if support >= min_support {
            out.set(u, v, Some(*c));
        }
    }
    Ok(out)
}

/// Inverse lookup from surface location to the pixels observing it.
pub struct SurfaceIndex<'m> {
    mesh: &'m TriangleMesh,
    tolerance: f64,
    pixels: Vec<(usize, usize)>,
    points: Vec<Vec3>,
    cells: HashMap<[i64; 3], Vec<usize>>,
}

/// A pixel returned by [`SurfaceIndex::query`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IndexMatch {
    pub u: usize,
    pub v: usize,
    pub distance: f64,
}

pub fn build_surface_index<'m>(
    map: &DenseSurfaceMap,
    mesh: &'m TriangleMesh,
    tolerance: f64,
) -> Result<SurfaceIndex<'m>, MeshError> {
    let mut index = SurfaceIndex {
        mesh,
        tolerance,
        pixels: Vec::new(),
        points: Vec::new(),
        cells: HashMap::new(),
    };
    for (u, v, c) in map.mapped() {
        let p = surface_point(mesh, c)?;
        let id = index.points.len();
        index.pixels.push((u, v));
        index.points.push(p);
        index.cells.entry(index.cell_of(&p)).or_default().push(id);
    }
    Ok(index)
}

impl SurfaceIndex<'_> {
    fn cell_of(&self, p: &Vec3) -> [i64; 3] {
        let size = self.tolerance.max(1e-12);
        [0, 1, 2].map(|i| (p[i] / size).floor() as i64)
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Pixels within tolerance of `c`, nearest first (ties in row-major order).
    pub fn query(&self, c: &SurfaceCoordinate) -> Result<Vec<IndexMatch>, MeshError> {
        Ok(self.query_point(&surface_point(self.mesh, c)?))
    }

    pub fn query_point(&self, p: &Vec3) -> Vec<IndexMatch> {
        let center = self.cell_of(p);
        let mut out = Vec::new();
        for dx in -1..=1 {
            for dy in -1..=1 {
                for dz in -1..=1 {
                    let key = [center[0] + dx, center[1] + dy, center[2] + dz];
                    let Some(ids) = self.cells.get(&key) else { continue };
                    for &id in ids {
                        let distance = (self.points[id] - p).norm();
                        if distance <= self.tolerance {
                            let (u, v) = self.pixels[id];
                            out.push(IndexMatch { u, v, distance });
                        }
                    }
                }
            }
        }
        out.sort_by(|a, b| {
            a.distance
                .total_cmp(&b.distance)
                .then((a.v, a.u).cmp(&(b.v, b.u)))
        });
        out
    }
}

#[derive(Debug, Clone)]
struct Candidate {
    caster: (usize, usize),
    rank: usize,
    hit_coord: SurfaceCoordinate,
    observer: (usize, usize),
    distance: f64,
}

/// Correspondences from rays of `caster` matched into `observer`'s map,
/// in caster row-major order then hit rank.
fn cast_direction(
    caster: &ImageRecord,
    caster_subject: &SubjectPrior,
    observer_subject: &SubjectPrior,
    params: &ExtractionParams,
) -> Result<Vec<(Pixel, Pixel, SurfaceCoordinate, usize)>, VcError> {
    let canonical = params.canonical.as_ref().unwrap_or(&observer_subject.mesh);
    let filtered;
    let observer_map = if params.min_neighbor_support > 0 {
        filtered = drop_incoherent(
            &observer_subject.surface_map,
            canonical,
            params.coherence_radius,
            params.min_neighbor_support,
        )?;
        &filtered
    } else {
        &observer_subject.surface_map
    };
    let index = build_surface_index(observer_map, canonical, params.match_tolerance)?;
    if index.is_empty() {
        return Ok(Vec::new());
    }
    let stride = params.stride.max(1);
    let map = &caster_subject.surface_map;
    let rows: Vec<usize> = (0..map.height()).step_by(stride).collect();
    let per_row: Vec<Vec<Candidate>> = rows
        .par_iter()
        .map(|&v| -> Result<Vec<Candidate>, MeshError> {
            let mut found = Vec::new();
            for u in (0..map.width()).step_by(stride) {
                if map.get(u, v).is_none() {
                    continue;
                }
                let ray = caster.camera_ray(Pixel::new(u as f64, v as f64));
                let hits = caster_subject.cast(&ray);
                for (rank, hit) in hits.iter().take(params.max_hits_per_pixel).enumerate() {
                    let matches = index.query(&hit.coord)?;
                    if let Some(best) = matches.first() {
                        found.push(Candidate {
                            caster: (u, v),
                            rank,
                            hit_coord: hit.coord,
                            observer: (best.u, best.v),
                            distance: best.distance,
                        });
                    }
                }
            }
            Ok(found)
        })
        .collect::<Result<_, _>>()?;

    // Mutual-nearest filtering: each observer pixel keeps its closest crossing.
    let mut best_for_observer: HashMap<(usize, usize), Candidate> = HashMap::new();
    for cand in per_row.into_iter().flatten() {
        match best_for_observer.get(&cand.observer) {
            Some(kept) if !closer(&cand, kept) => {}
            _ => {
                best_for_observer.insert(cand.observer, cand);
            }
        }
    }
    let mut kept: Vec<Candidate> = best_for_observer.into_values().collect();
    kept.sort_by(|a, b| {
        (a.caster.1, a.caster.0, a.rank).cmp(&(b.caster.1, b.caster.0, b.rank))
    });

    let mut out = Vec::with_capacity(kept.len());
    for cand in kept {
        let observer_coord = *observer_map
            .get(cand.observer.0, cand.observer.1)
            .expect("indexed pixel is mapped");
        let observer_px = Pixel::new(cand.observer.0 as f64, cand.observer.1 as f64);
        let mut caster_px = Pixel::new(cand.caster.0 as f64, cand.caster.1 as f64);
        let mut coord = cand.hit_coord;
        if params.subpixel {
            let x = caster_subject.camera_point(&observer_coord)?;
            match project(&Se3Pose::identity(), &caster.intrinsics, &x) {
                Ok(p) => {
                    caster_px = p;
                    coord = observer_coord;
                }
                Err(_) => continue,
            }
        }
        out.push((caster_px, observer_px, coord, cand.rank));
    }
    Ok(out)
}

fn closer(a: &Candidate, b: &Candidate) -> bool {
    let ka = (a.caster.1, a.caster.0, a.rank);
    let kb = (b.caster.1, b.caster.0, b.rank);
    a.distance < b.distance || (a.distance == b.distance && ka < kb)
}

/// Virtual correspondences between two images, both casting directions.
///
/// Subjects are matched by person identifier. Output is ordered by source
/// image, then sampled pixel in row-major order, then hit rank.
pub fn extract_vcs(
    a: &ImageRecord,
    b: &ImageRecord,
    params: &ExtractionParams,
) -> Result<Vec<VirtualCorrespondence>, VcError> {
    let mut from_a = Vec::new();
    let mut from_b = Vec::new();
    for sa in &a.subjects {
        let Some(sb) = b.subject(&sa.person) else { continue };
        if !sa.mesh.same_topology(&sb.mesh) {
            return Err(VcError::TopologyMismatch(sa.person.clone()));
        }
        for (pa, pb, coord, rank) in cast_direction(a, sa, sb, params)? {
            from_a.push(VirtualCorrespondence {
                pixel_a: pa,
                pixel_b: pb,
                coord: Some(coord),
                hit_rank: rank,
                source: VcSource::A,
            });
        }
        for (pb, pa, coord, rank) in cast_direction(b, sb, sa, params)? {
            from_b.push(VirtualCorrespondence {
                pixel_a: pa,
                pixel_b: pb,
                coord: Some(coord),
                hit_rank: rank,
                source: VcSource::B,
            });
        }
    }
    from_a.extend(from_b);
    Ok(from_a)
}

/// Smallest distance between the two VC rays over non-negative ray parameters.
pub fn vc_ray_gap(
    vc: &VirtualCorrespondence,
    pose_a: &Se3Pose,
    pose_b: &Se3Pose,
    k_a: &CameraIntrinsics,
    k_b: &CameraIntrinsics,
) -> f64 {
    let ra = ray_through_pixel(pose_a, k_a, vc.pixel_a);
    let rb = ray_through_pixel(pose_b, k_b, vc.pixel_b);
    ray_ray_distance(&ra, &rb)
}

/// Closest approach of two rays restricted to `s, t ≥ 0`.
pub fn ray_ray_distance(ra: &Ray, rb: &Ray) -> f64 {
    let (o1, d1, o2, d2) = (ra.origin(), ra.direction(), rb.origin(), rb.direction());
    let dist = |s: f64, t: f64| ((o1 + d1 * s) - (o2 + d2 * t)).norm();
    if let Some((s, t)) = crate::geometry::closest_approach(o1, d1, o2, d2) {
        if s >= 0.0 && t >= 0.0 {
            return dist(s, t);
        }
    }
    // Minimum lies on the boundary of the quadrant.
    let t_at_s0 = (o1 - o2).dot(d2).max(0.0);
    let s_at_t0 = (o2 - o1).dot(d1).max(0.0);
    dist(0.0, t_at_s0).min(dist(s_at_t0, 0.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::{first_hit, icosphere};
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn render(mesh: &TriangleMesh, k: &CameraIntrinsics, w: usize, h: usize) -> DenseSurfaceMap {
        let mut map = DenseSurfaceMap::new(w, h);
        for v in 0..h {
            for u in 0..w {
                let ray = ray_through_pixel(&Se3Pose::identity(), k, Pixel::new(u as f64, v as f64));
                map.set(u, v, first_hit(mesh, &ray).map(|hit| hit.coord));
            }
        }
        map
    }

    fn sphere_record(id: &str) -> ImageRecord {
        let k = CameraIntrinsics::simple(60.0, 32.0, 24.0).unwrap();
        let mesh = icosphere(Vec3::new(0.0, 0.0, 4.0), 1.0, 3);
        let map = render(&mesh, &k, 64, 48);
        ImageRecord::new(id, k, 64, 48, vec![SubjectPrior::new("p0", map, mesh)]).unwrap()
    }

    #[test]
    fn empty_map_index_returns_nothing() {
        let mesh = icosphere(Vec3::zeros(), 1.0, 1);
        let map = DenseSurfaceMap::new(4, 4);
        let index = build_surface_index(&map, &mesh, 0.01).unwrap();
        let c = SurfaceCoordinate::new(0, [1.0, 0.0, 0.0]).unwrap();
        assert!(index.query(&c).unwrap().is_empty());
    }

    #[test]
    fn single_entry_index() {
        let mesh = icosphere(Vec3::zeros(), 1.0, 1);
        let mut map = DenseSurfaceMap::new(4, 4);
        let c = SurfaceCoordinate::new(3, [0.2, 0.3, 0.5]).unwrap();
        map.set(2, 1, Some(c));
        let index = build_surface_index(&map, &mesh, 0.01).unwrap();
        let m = index.query(&c).unwrap();
        assert_eq!(m.len(), 1);
        assert_eq!((m[0].u, m[0].v), (2, 1));
    }

    #[test]
    fn index_matches_linear_scan() {
        let rec = sphere_record("a");
        let s = &rec.subjects[0];
        let tol = 0.05;
        let index = build_surface_index(&s.surface_map, &s.mesh, tol).unwrap();
        let mapped: Vec<_> = s.surface_map.mapped().collect();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..100 {
            let (_, _, c) = mapped[rng.random_range(0..mapped.len())];
            let got: Vec<(usize, usize)> =
                index.query(c).unwrap().iter().map(|m| (m.u, m.v)).collect();
            let p = surface_point(&s.mesh, c).unwrap();
            let mut want: Vec<(f64, usize, usize)> = mapped
                .iter()
                .filter_map(|(u, v, d)| {
                    let dist = (surface_point(&s.mesh, d).unwrap() - p).norm();
                    (dist <= tol).then_some((dist, *u, *v))
                })
                .collect();
            want.sort_by(|a, b| a.0.total_cmp(&b.0).then((a.2, a.1).cmp(&(b.2, b.1))));
            let want: Vec<(usize, usize)> = want.into_iter().map(|(_, u, v)| (u, v)).collect();
            assert_eq!(got, want);
        }
    }

    #[test]
    fn self_matching_is_identity() {
        let rec = sphere_record("a");
        let params = ExtractionParams {
            min_neighbor_support: 0,
            ..ExtractionParams::default()
        };
        let vcs = extract_vcs(&rec, &rec, &params).unwrap();
        let sampled_foreground = rec.subjects[0]
            .surface_map
            .mapped()
            .filter(|(u, v, _)| u % 4 == 0 && v % 4 == 0)
            .count();
        let rank0: Vec<_> = vcs
            .iter()
            .filter(|vc| vc.hit_rank == 0 && vc.source == VcSource::A)
            .collect();
        assert_eq!(rank0.len(), sampled_foreground);
        for vc in rank0 {
            assert!(vc.pixel_a.distance(&vc.pixel_b) < 1e-9);
        }
    }

    #[test]
    fn incoherent_entries_are_dropped() {
        let rec = sphere_record("a");
        let s = &rec.subjects[0];
        let mut noisy = s.surface_map.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n_faces = s.mesh.faces().len();
        let mut planted = Vec::new();
        for (u, v, _) in s.surface_map.mapped().filter(|(u, v, _)| (u + v) % 7 == 0) {
            let c = SurfaceCoordinate::new(rng.random_range(0..n_faces), [1.0, 0.0, 0.0]).unwrap();
            planted.push((u, v, c));
        }
        for (u, v, c) in &planted {
            noisy.set(*u, *v, Some(*c));
        }
        let kept = drop_incoherent(&noisy, &s.mesh, 0.2, 2).unwrap();
        // Planted entries far from the true surface point are gone.
        for (u, v, c) in &planted {
            let truth = surface_point(&s.mesh, s.surface_map.get(*u, *v).unwrap()).unwrap();
            if (surface_point(&s.mesh, c).unwrap() - truth).norm() > 0.5 {
                assert!(kept.get(*u, *v).is_none());
            }
        }
        // Every surviving entry is unchanged from the noisy input.
        for (u, v, c) in kept.mapped() {
            assert_eq!(noisy.get(u, v), Some(c));
        }
        assert!(kept.mapped_count() * 10 > s.surface_map.mapped_count() * 7);
    }

    #[test]
    fn coherence_filter_off_keeps_everything() {
        let rec = sphere_record("a");
        let s = &rec.subjects[0];
        let kept = drop_incoherent(&s.surface_map, &s.mesh, 0.1, 0).unwrap();
        assert_eq!(kept, s.surface_map);
    }

    #[test]
    fn empty_observer_map_gives_nothing() {
        let a = sphere_record("a");
        let mut b = sphere_record("b");
        b.subjects[0].surface_map = DenseSurfaceMap::new(64, 48);
        let vcs = extract_vcs(&a, &b, &ExtractionParams::default()).unwrap();
        assert!(vcs.is_empty());
    }

    #[test]
    fn topology_mismatch_is_reported() {
        let a = sphere_record("a");
        let mut b = sphere_record("b");
        let mesh = icosphere(Vec3::new(0.0, 0.0, 4.0), 1.0, 2);
        b.subjects[0].surface_map = DenseSurfaceMap::new(64, 48);
        b.subjects[0].mesh = mesh;
        assert!(matches!(
            extract_vcs(&a, &b, &ExtractionParams::default()),
            Err(VcError::TopologyMismatch(_))
        ));
    }

    #[test]
    fn deterministic_output() {
        let a = sphere_record("a");
        let b = sphere_record("b");
        let p = ExtractionParams::default();
        let x = extract_vcs(&a, &b, &p).unwrap();
        let y = extract_vcs(&a, &b, &p).unwrap();
        assert_eq!(format!("{x:?}"), format!("{y:?}"));
    }

    fn vc(pa: Pixel, pb: Pixel) -> VirtualCorrespondence {
        VirtualCorrespondence {
            pixel_a: pa,
            pixel_b: pb,
            coord: None,
            hit_rank: 0,
            source: VcSource::A,
        }
    }

    #[test]
    fn ray_gap_cases() {
        let k = CameraIntrinsics::simple(100.0, 50.0, 50.0).unwrap();
        let a = Se3Pose::identity();
        let b = Se3Pose::new(crate::geometry::so3_exp(&Vec3::new(0.0, -0.4, 0.0)), Vec3::new(-1.0, 0.0, 0.2))
            .unwrap();
        let x = Vec3::new(0.3, -0.2, 3.0);
        let v = vc(project(&a, &k, &x).unwrap(), project(&b, &k, &x).unwrap());
        assert!(vc_ray_gap(&v, &a, &b, &k, &k) < 1e-12);

        // Two parallel optical axes one unit apart.
        let shifted = Se3Pose::new(crate::geometry::Mat3::identity(), Vec3::new(-1.0, 0.0, 0.0)).unwrap();
        let c = Pixel::new(50.0, 50.0);
        assert_relative_eq!(vc_ray_gap(&vc(c, c), &a, &shifted, &k, &k), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn ray_gap_matches_grid_search() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut rv = |r: f64| Vec3::new(rng.random_range(-r..r), rng.random_range(-r..r), rng.random_range(-r..r));
        for _ in 0..40 {
            let ra = Ray::new(rv(1.0), rv(1.0)).unwrap();
            let rb = Ray::new(rv(1.0), rv(1.0)).unwrap();
            let got = ray_ray_distance(&ra, &rb);
            // Oracle: dense grid over (s, t), then local zoom.
            let f = |s: f64, t: f64| (ra.point_at(s) - rb.point_at(t)).norm();
            let (mut bs, mut bt, mut best) = (0.0, 0.0, f(0.0, 0.0));
            let mut half = 4.0;
            let (mut cs, mut ct) = (4.0, 4.0);
            for _ in 0..30 {
                for i in 0..=40 {
                    for j in 0..=40 {
                        let s = (cs - half + half * i as f64 / 20.0).max(0.0);
                        let t = (ct - half + half * j as f64 / 20.0).max(0.0);
                        let d = f(s, t);
                        if d < best {
                            best = d;
                            bs = s;
                            bt = t;
                        }
                    }
                }
                cs = bs;
                ct = bt;
                half *= 0.5;
            }
            assert!((got - best).abs() < 1e-6, "{got} vs {best}");
        }
    }
}
