//! Static 3D scene: flight volume, box-shaped buildings and ground users,
//! plus the occlusion query used by the channel oracle.
//!
//! The world occupies `[0, bounds.x] x [0, bounds.y] x [0, bounds.z]`. The
//! UAV starts (and must finish) at `(0, 0, H_min)`.

use std::ops::{Add, Mul, Sub};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Vec3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Vec3 {
    pub const ZERO: Vec3 = Vec3 {
        x: 0.0,
        y: 0.0,
        z: 0.0,
    };

    pub const fn new(x: f64, y: f64, z: f64) -> Self {
        Vec3 { x, y, z }
    }

    pub fn norm(self) -> f64 {
        (self.x * self.x + self.y * self.y + self.z * self.z).sqrt()
    }

    pub fn distance(self, other: Vec3) -> f64 {
        (self - other).norm()
    }

    pub fn horizontal_distance(self, other: Vec3) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }

    pub fn to_array(self) -> [f64; 3] {
        [self.x, self.y, self.z]
    }

    pub fn axis(self, i: usize) -> f64 {
        match i {
            0 => self.x,
            1 => self.y,
            2 => self.z,
            _ => panic!("axis index {i} out of range"),
        }
    }

    /// Componentwise clamp into `[lo, hi]`.
    pub fn clamp(self, lo: Vec3, hi: Vec3) -> Vec3 {
        Vec3::new(
            self.x.clamp(lo.x, hi.x),
            self.y.clamp(lo.y, hi.y),
            self.z.clamp(lo.z, hi.z),
        )
    }
}

impl Add for Vec3 {
    type Output = Vec3;
    fn add(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x + o.x, self.y + o.y, self.z + o.z)
    }
}

impl Sub for Vec3 {
    type Output = Vec3;
    fn sub(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x - o.x, self.y - o.y, self.z - o.z)
    }
}

impl Mul<f64> for Vec3 {
    type Output = Vec3;
    fn mul(self, s: f64) -> Vec3 {
        Vec3::new(self.x * s, self.y * s, self.z * s)
    }
}

/// Axis-aligned box obstacle.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Building {
    pub min_corner: Vec3,
    pub max_corner: Vec3,
}

impl Building {
    pub fn new(min_corner: Vec3, max_corner: Vec3) -> Result<Self> {
        let b = Building {
            min_corner,
            max_corner,
        };
        b.validate()?;
        Ok(b)
    }

    fn validate(&self) -> Result<()> {
        let (lo, hi) = (self.min_corner, self.max_corner);
        if !(lo.is_finite() && hi.is_finite()) {
            return Err(Error::InvalidConfig("building corner not finite".into()));
        }
        if !(lo.x < hi.x && lo.y < hi.y && lo.z < hi.z) {
            return Err(Error::InvalidConfig(format!(
                "building min corner {lo:?} not strictly below max corner {hi:?}"
            )));
        }
        Ok(())
    }

    pub fn height(&self) -> f64 {
        self.max_corner.z
    }

    pub fn volume(&self) -> f64 {
        let d = self.max_corner - self.min_corner;
        d.x * d.y * d.z
    }

    /// Strict interior test.
    pub fn contains_interior(&self, p: Vec3) -> bool {
        (0..3).all(|i| {
            let v = p.axis(i);
            v > self.min_corner.axis(i) && v < self.max_corner.axis(i)
        })
    }

    /// Closed-box test with a slack of `tol` on every face.
    pub fn contains_closed(&self, p: Vec3, tol: f64) -> bool {
        (0..3).all(|i| {
            let v = p.axis(i);
            v >= self.min_corner.axis(i) - tol && v <= self.max_corner.axis(i) + tol
        })
    }

    pub fn corners(&self) -> [Vec3; 8] {
        let (lo, hi) = (self.min_corner, self.max_corner);
        let mut out = [Vec3::ZERO; 8];
        for (k, c) in out.iter_mut().enumerate() {
            *c = Vec3::new(
                if k & 1 == 0 { lo.x } else { hi.x },
                if k & 2 == 0 { lo.y } else { hi.y },
                if k & 4 == 0 { lo.z } else { hi.z },
            );
        }
        out
    }

    fn footprints_overlap(&self, other: &Building) -> bool {
        self.min_corner.x < other.max_corner.x
            && other.min_corner.x < self.max_corner.x
            && self.min_corner.y < other.max_corner.y
            && other.min_corner.y < self.max_corner.y
    }

    /// Whether the open segment `(a, b)` meets the open interior of the box.
    ///
    /// Slab method: intersect the open parameter intervals of the three
    /// slabs with `(0, 1)`. Segments that only touch a face, edge or corner
    /// yield an empty intersection and are reported unblocked.
    pub fn blocks_segment(&self, a: Vec3, b: Vec3) -> bool {
        let d = b - a;
        let mut t_lo = 0.0_f64;
        let mut t_hi = 1.0_f64;
        for i in 0..3 {
            let (o, dir) = (a.axis(i), d.axis(i));
            let (lo, hi) = (self.min_corner.axis(i), self.max_corner.axis(i));
            if dir == 0.0 {
                if o <= lo || o >= hi {
                    return false;
                }
                continue;
            }
            let inv = 1.0 / dir;
            let (mut t0, mut t1) = ((lo - o) * inv, (hi - o) * inv);
            if t0 > t1 {
                std::mem::swap(&mut t0, &mut t1);
            }
            t_lo = t_lo.max(t0);
            t_hi = t_hi.min(t1);
            if t_lo >= t_hi {
                return false;
            }
        }
        t_lo < t_hi
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroundUser {
    pub id: usize,
    pub position: Vec3,
    pub payload_bits: f64,
}

/// Scene generation parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WorldConfig {
    pub size: Vec3,
    pub uav_min_height: f64,
    pub user_max_height: f64,
    pub building_count: usize,
    pub footprint_min: f64,
    pub footprint_max: f64,
    pub building_height_min: f64,
    pub building_height_max: f64,
    pub user_count: usize,
    pub payload_bits: f64,
    pub max_placement_attempts: usize,
}

impl Default for WorldConfig {
    fn default() -> Self {
        WorldConfig::full()
    }
}

impl WorldConfig {
    /// 1000 m x 1000 m x 750 m scene, 15 users carrying 26 Mb each.
    pub fn full() -> Self {
        WorldConfig {
            size: Vec3::new(1000.0, 1000.0, 750.0),
            uav_min_height: 250.0,
            user_max_height: 250.0,
            building_count: 20,
            footprint_min: 40.0,
            footprint_max: 120.0,
            building_height_min: 60.0,
            building_height_max: 250.0,
            user_count: 15,
            payload_bits: 26e6,
            max_placement_attempts: 10_000,
        }
    }

    /// Reduced scene used for tests and quick experiments.
    pub fn desk() -> Self {
        WorldConfig {
            size: Vec3::new(300.0, 300.0, 200.0),
            uav_min_height: 70.0,
            user_max_height: 20.0,
            building_count: 12,
            footprint_min: 15.0,
            footprint_max: 40.0,
            building_height_min: 20.0,
            building_height_max: 70.0,
            user_count: 3,
            payload_bits: 5e6,
            max_placement_attempts: 10_000,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if !(self.size.is_finite() && self.size.x > 0.0 && self.size.y > 0.0 && self.size.z > 0.0)
        {
            return bad("world size must be positive");
        }
        if !(self.uav_min_height >= 0.0 && self.uav_min_height < self.size.z) {
            return bad("uav_min_height must lie inside the world height");
        }
        if !(self.user_max_height >= 0.0 && self.user_max_height <= self.size.z) {
            return bad("user_max_height must lie inside the world height");
        }
        if self.user_count < 1 {
            return bad("at least one ground user is required");
        }
        if !(self.footprint_min > 0.0 && self.footprint_min <= self.footprint_max) {
            return bad("footprint range invalid");
        }
        if !(self.building_height_min > 0.0
            && self.building_height_min <= self.building_height_max
            && self.building_height_max <= self.size.z)
        {
            return bad("building height range invalid");
        }
        if !(self.payload_bits >= 0.0) {
            return bad("payload must be nonnegative");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct World {
    /// Extent of the box anchored at the origin.
    pub bounds: Vec3,
    /// `[H_min, H_max]` altitude band the UAV may occupy.
    pub uav_height_range: (f64, f64),
    pub buildings: Vec<Building>,
    pub users: Vec<GroundUser>,
    pub uav_start: Vec3,
}

impl World {
    pub fn empty(bounds: Vec3, uav_min_height: f64) -> Self {
        World {
            bounds,
            uav_height_range: (uav_min_height, bounds.z),
            buildings: Vec::new(),
            users: Vec::new(),
            uav_start: Vec3::new(0.0, 0.0, uav_min_height),
        }
    }

    pub fn diagonal(&self) -> f64 {
        self.bounds.norm()
    }

    pub fn uav_min(&self) -> Vec3 {
        Vec3::new(0.0, 0.0, self.uav_height_range.0)
    }

    pub fn uav_max(&self) -> Vec3 {
        Vec3::new(self.bounds.x, self.bounds.y, self.uav_height_range.1)
    }

    pub fn inside_bounds(&self, p: Vec3) -> bool {
        p.x >= 0.0
            && p.y >= 0.0
            && p.z >= 0.0
            && p.x <= self.bounds.x
            && p.y <= self.bounds.y
            && p.z <= self.bounds.z
    }

    pub fn inside_any_building(&self, p: Vec3) -> bool {
        self.buildings.iter().any(|b| b.contains_interior(p))
    }

    /// Checks every structural invariant of the scene.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        let (h_min, h_max) = self.uav_height_range;
        if !(h_min >= 0.0 && h_min < h_max && h_max <= self.bounds.z) {
            return bad(format!("uav height range {:?} invalid", self.uav_height_range));
        }
        if self.uav_start != Vec3::new(0.0, 0.0, h_min) {
            return bad("uav start must be (0, 0, H_min)".into());
        }
        for b in &self.buildings {
            b.validate()?;
            if !(self.inside_bounds(b.min_corner) && self.inside_bounds(b.max_corner)) {
                return bad(format!("building {b:?} outside bounds"));
            }
        }
        for u in &self.users {
            if !self.inside_bounds(u.position) || self.inside_any_building(u.position) {
                return bad(format!("user {} badly placed", u.id));
            }
            if !(u.payload_bits >= 0.0) {
                return bad(format!("user {} has negative payload", u.id));
            }
        }
        Ok(())
    }

    /// Draws `count` users uniformly over the ground footprint with
    /// `z` in `[0, max_height]`, rejecting points inside buildings.
    pub fn sample_users<R: Rng>(
        &self,
        count: usize,
        max_height: f64,
        payload_bits: f64,
        max_attempts: usize,
        rng: &mut R,
    ) -> Result<Vec<GroundUser>> {
        let mut users = Vec::with_capacity(count);
        let mut attempts = 0;
        while users.len() < count {
            if attempts >= max_attempts {
                return Err(Error::Placement {
                    what: "ground users",
                    attempts,
                });
            }
            attempts += 1;
            let p = Vec3::new(
                rng.random_range(0.0..=self.bounds.x),
                rng.random_range(0.0..=self.bounds.y),
                rng.random_range(0.0..=max_height),
            );
            if self.inside_any_building(p) {
                continue;
            }
            users.push(GroundUser {
                id: users.len(),
                position: p,
                payload_bits,
            });
        }
        Ok(users)
    }

    /// Copy of the world with the tallest `ceil(fraction * n)` buildings removed.
    pub fn without_tallest(&self, fraction: f64) -> World {
        let n = self.buildings.len();
        let remove = ((fraction * n as f64).ceil() as usize).min(n);
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| {
            self.buildings[b]
                .height()
                .total_cmp(&self.buildings[a].height())
                .then(a.cmp(&b))
        });
        let dropped: Vec<usize> = order[..remove].to_vec();
        let mut out = self.clone();
        out.buildings = self
            .buildings
            .iter()
            .enumerate()
            .filter(|(i, _)| !dropped.contains(i))
            .map(|(_, b)| *b)
            .collect();
        out
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<World> {
        let w: World = serde_json::from_str(text)?;
        w.validate()?;
        Ok(w)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<World> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        World::from_json(&text)
    }
}

/// Builds a random scene. Pure function of `(seed, config)`.
pub fn generate_world(seed: u64, config: &WorldConfig) -> Result<World> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut world = World::empty(config.size, config.uav_min_height);

    let mut attempts = 0;
    while world.buildings.len() < config.building_count {
        if attempts >= config.max_placement_attempts {
            return Err(Error::Placement {
                what: "buildings",
                attempts,
            });
        }
        attempts += 1;
        let w = rng.random_range(config.footprint_min..=config.footprint_max);
        let d = rng.random_range(config.footprint_min..=config.footprint_max);
        if w >= config.size.x || d >= config.size.y {
            continue;
        }
        let h = rng.random_range(config.building_height_min..=config.building_height_max);
        let x0 = rng.random_range(0.0..config.size.x - w);
        let y0 = rng.random_range(0.0..config.size.y - d);
        let b = Building {
            min_corner: Vec3::new(x0, y0, 0.0),
            max_corner: Vec3::new(x0 + w, y0 + d, h),
        };
        if world.buildings.iter().any(|o| o.footprints_overlap(&b)) {
            continue;
        }
        world.buildings.push(b);
    }

    world.users = world.sample_users(
        config.user_count,
        config.user_max_height,
        config.payload_bits,
        config.max_placement_attempts,
        &mut rng,
    )?;
    Ok(world)
}

/// True iff the open segment `(a, b)` crosses the interior of any building.
pub fn segment_blocked(a: Vec3, b: Vec3, world: &World) -> bool {
    world.buildings.iter().any(|bl| bl.blocks_segment(a, b))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit_box() -> Building {
        Building::new(Vec3::new(0.0, 0.0, 0.0), Vec3::new(1.0, 1.0, 1.0)).unwrap()
    }

    #[test]
    fn vertical_segment_in_empty_world_is_clear() {
        let w = World::empty(Vec3::new(1000.0, 1000.0, 750.0), 250.0);
        assert!(!segment_blocked(
            Vec3::new(0.0, 0.0, 500.0),
            Vec3::new(0.0, 0.0, 10.0),
            &w
        ));
    }

    #[test]
    fn through_interior_is_blocked() {
        let b = unit_box();
        assert!(b.blocks_segment(Vec3::new(-1.0, 0.5, 0.5), Vec3::new(2.0, 0.5, 0.5)));
        assert!(b.blocks_segment(Vec3::new(-1.0, -1.0, -1.0), Vec3::new(2.0, 2.0, 2.0)));
    }

    #[test]
    fn grazing_face_is_clear() {
        let b = unit_box();
        // runs along the top face
        assert!(!b.blocks_segment(Vec3::new(-1.0, 0.5, 1.0), Vec3::new(2.0, 0.5, 1.0)));
        // touches a single edge
        assert!(!b.blocks_segment(Vec3::new(-1.0, 1.0, 0.0), Vec3::new(1.0, 3.0, 0.0)));
        // ends exactly on a face
        assert!(!b.blocks_segment(Vec3::new(-1.0, 0.5, 0.5), Vec3::new(0.0, 0.5, 0.5)));
    }

    #[test]
    fn segment_stopping_short_is_clear() {
        let b = unit_box();
        assert!(!b.blocks_segment(Vec3::new(-2.0, 0.5, 0.5), Vec3::new(-0.1, 0.5, 0.5)));
    }

    #[test]
    fn bad_building_rejected() {
        assert!(Building::new(Vec3::new(1.0, 0.0, 0.0), Vec3::new(0.0, 1.0, 1.0)).is_err());
    }

    #[test]
    fn full_world_users_under_250m() {
        let w = generate_world(7, &WorldConfig::full()).unwrap();
        assert_eq!(w.users.len(), 15);
        assert_eq!(w.buildings.len(), 20);
        for u in &w.users {
            assert!((0.0..=250.0).contains(&u.position.z));
            assert!(!w.inside_any_building(u.position));
            assert_eq!(u.payload_bits, 26e6);
        }
        for b in &w.buildings {
            assert!(b.max_corner.z <= 250.0);
        }
        assert_eq!(w.uav_start, Vec3::new(0.0, 0.0, 250.0));
        w.validate().unwrap();
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate_world(7, &WorldConfig::full()).unwrap();
        let b = generate_world(7, &WorldConfig::full()).unwrap();
        assert_eq!(a, b);
        let c = generate_world(8, &WorldConfig::full()).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn no_buildings_means_all_los() {
        let cfg = WorldConfig {
            building_count: 0,
            ..WorldConfig::full()
        };
        let w = generate_world(3, &cfg).unwrap();
        for u in &w.users {
            assert!(!segment_blocked(w.uav_start, u.position, &w));
            assert!(!segment_blocked(Vec3::new(600.0, 300.0, 700.0), u.position, &w));
        }
    }

    #[test]
    fn impossible_config_is_rejected() {
        let cfg = WorldConfig {
            size: Vec3::new(100.0, 100.0, 750.0),
            building_count: 50,
            footprint_min: 40.0,
            footprint_max: 60.0,
            max_placement_attempts: 500,
            ..WorldConfig::full()
        };
        assert!(matches!(
            generate_world(1, &cfg),
            Err(Error::Placement { what: "buildings", .. })
        ));
        let cfg = WorldConfig {
            user_count: 0,
            ..WorldConfig::full()
        };
        assert!(generate_world(1, &cfg).is_err());
    }

    #[test]
    fn json_round_trip_and_validation() {
        let w = generate_world(11, &WorldConfig::desk()).unwrap();
        let back = World::from_json(&w.to_json().unwrap()).unwrap();
        assert_eq!(w, back);

        let mut broken = w.clone();
        broken.uav_start = Vec3::new(1.0, 0.0, 70.0);
        assert!(World::from_json(&broken.to_json().unwrap()).is_err());
    }

    #[test]
    fn removing_tallest_quartile() {
        let w = generate_world(5, &WorldConfig::full()).unwrap();
        let cut = w.without_tallest(0.25);
        assert_eq!(cut.buildings.len(), 15);
        let max_kept = cut.buildings.iter().map(|b| b.height()).fold(0.0, f64::max);
        let removed: Vec<_> = w
            .buildings
            .iter()
            .filter(|b| !cut.buildings.contains(b))
            .collect();
        assert_eq!(removed.len(), 5);
        assert!(removed.iter().all(|b| b.height() >= max_kept));
        assert_eq!(cut.users, w.users);
    }
}
