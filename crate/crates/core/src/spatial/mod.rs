//! Land-use profiles from color-coded map tiles, plus the geodesic distance
//! and profile similarity used to pick training devices.

mod legend;
mod raster;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

pub use legend::{hex_color, parse_hex_color, ColorLegend, LegendEntry};
pub use raster::{Raster, Rgb};

use crate::domain::{check_coordinates, DeviceMeta};
use crate::error::{Error, Result};

pub const EARTH_RADIUS_KM: f64 = 6371.0;

/// Road types followed by PoI types, in profile order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Category {
    Oneway,
    Twoway,
    Highway,
    HumanMade,
    NaturalLand,
    Educational,
    Medical,
    Water,
    Park,
    Shopping,
    Attraction,
}

impl Category {
    pub const COUNT: usize = 11;
    pub const ALL: [Category; Category::COUNT] = [
        Category::Oneway,
        Category::Twoway,
        Category::Highway,
        Category::HumanMade,
        Category::NaturalLand,
        Category::Educational,
        Category::Medical,
        Category::Water,
        Category::Park,
        Category::Shopping,
        Category::Attraction,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Category::Oneway => "oneway",
            Category::Twoway => "twoway",
            Category::Highway => "highway",
            Category::HumanMade => "human_made",
            Category::NaturalLand => "natural_land",
            Category::Educational => "educational",
            Category::Medical => "medical",
            Category::Water => "water",
            Category::Park => "park",
            Category::Shopping => "shopping",
            Category::Attraction => "attraction",
        }
    }

    pub fn is_road(self) -> bool {
        matches!(self, Category::Oneway | Category::Twoway | Category::Highway)
    }

    pub fn from_name(name: &str) -> Result<Self> {
        Category::ALL
            .iter()
            .copied()
            .find(|c| c.name() == name)
            .ok_or_else(|| Error::Parse(format!("unknown land-use category {name:?}")))
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Category {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Category::from_name(s)
    }
}

/// Coverage fraction of each land-use category among legend-matched pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpatialProfile {
    fractions: [f64; Category::COUNT],
}

impl SpatialProfile {
    pub const SUM_TOLERANCE: f64 = 1e-9;

    pub fn new(fractions: [f64; Category::COUNT]) -> Result<Self> {
        if fractions.iter().any(|f| !(0.0..=1.0).contains(f)) {
            return Err(Error::invalid("profile fractions must lie in [0, 1]"));
        }
        let sum: f64 = fractions.iter().sum();
        if (sum - 1.0).abs() > Self::SUM_TOLERANCE {
            return Err(Error::invalid(format!("profile fractions sum to {sum}, expected 1")));
        }
        Ok(SpatialProfile { fractions })
    }

    /// A profile with all coverage in one category.
    pub fn pure(category: Category) -> Self {
        let mut fractions = [0.0; Category::COUNT];
        fractions[category.index()] = 1.0;
        SpatialProfile { fractions }
    }

    pub fn fractions(&self) -> &[f64; Category::COUNT] {
        &self.fractions
    }

    pub fn get(&self, c: Category) -> f64 {
        self.fractions[c.index()]
    }
}

impl Serialize for SpatialProfile {
    fn serialize<S: Serializer>(&self, ser: S) -> std::result::Result<S::Ok, S::Error> {
        use serde::ser::SerializeMap;
        let mut m = ser.serialize_map(Some(Category::COUNT))?;
        for c in Category::ALL {
            m.serialize_entry(c.name(), &self.fractions[c.index()])?;
        }
        m.end()
    }
}

impl<'de> Deserialize<'de> for SpatialProfile {
    fn deserialize<D: Deserializer<'de>>(de: D) -> std::result::Result<Self, D::Error> {
        use serde::de::Error as _;
        let map = BTreeMap::<String, f64>::deserialize(de)?;
        let mut fractions = [0.0; Category::COUNT];
        let mut seen = 0;
        for (k, v) in map {
            let c = Category::from_name(&k).map_err(D::Error::custom)?;
            fractions[c.index()] = v;
            seen += 1;
        }
        if seen != Category::COUNT {
            return Err(D::Error::custom(format!(
                "profile must name all {} categories, got {seen}",
                Category::COUNT
            )));
        }
        SpatialProfile::new(fractions).map_err(D::Error::custom)
    }
}

/// Counts exact legend-color matches per category. Background and
/// unrecognised pixels are left out of the denominator.
pub fn profile_from_raster(image: &Raster, legend: &ColorLegend) -> Result<SpatialProfile> {
    let mut counts = [0u64; Category::COUNT];
    for &px in image.pixels() {
        if let Some(LegendEntry::Category(c)) = legend.lookup(px) {
            counts[c.index()] += 1;
        }
    }
    let total: u64 = counts.iter().sum();
    if total == 0 {
        return Err(Error::LegendMismatch);
    }
    let mut fractions = [0.0; Category::COUNT];
    for (f, &n) in fractions.iter_mut().zip(&counts) {
        *f = n as f64 / total as f64;
    }
    SpatialProfile::new(fractions)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LatLon {
    pub lat: f64,
    pub lon: f64,
}

impl LatLon {
    pub fn new(lat: f64, lon: f64) -> Self {
        LatLon { lat, lon }
    }
}

/// Great-circle distance on a spherical Earth.
pub fn haversine_km(a: LatLon, b: LatLon) -> Result<f64> {
    check_coordinates(a.lat, a.lon)?;
    check_coordinates(b.lat, b.lon)?;
    let (phi1, phi2) = (a.lat.to_radians(), b.lat.to_radians());
    let dphi = phi2 - phi1;
    let dlambda = (b.lon - a.lon).to_radians();
    let h = (dphi / 2.0).sin().powi(2) + phi1.cos() * phi2.cos() * (dlambda / 2.0).sin().powi(2);
    Ok(2.0 * EARTH_RADIUS_KM * h.sqrt().min(1.0).asin())
}

/// Cosine similarity of two profiles.
pub fn profile_similarity(p: &SpatialProfile, q: &SpatialProfile) -> Result<f64> {
    let dot: f64 = p.fractions.iter().zip(&q.fractions).map(|(a, b)| a * b).sum();
    let np = p.fractions.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nq = q.fractions.iter().map(|a| a * a).sum::<f64>().sqrt();
    if np == 0.0 || nq == 0.0 {
        return Err(Error::invalid("zero profile vector"));
    }
    Ok((dot / (np * nq)).clamp(0.0, 1.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionMode {
    Distance,
    Similarity,
}

/// Picks the pool device closest to `target` (distance mode) or with the most
/// similar land-use profile (similarity mode). Ties go to the smallest id.
pub fn nearest_device<'a>(
    target: &DeviceMeta,
    pool: &'a [DeviceMeta],
    mode: SelectionMode,
) -> Result<&'a DeviceMeta> {
    if pool.is_empty() {
        return Err(Error::Empty("device pool"));
    }
    if pool.iter().any(|d| d.device_id == target.device_id) {
        return Err(Error::invalid(format!("target {} is in the pool", target.device_id)));
    }
    let here = LatLon::new(target.latitude, target.longitude);
    let mut best: Option<(f64, &DeviceMeta)> = None;
    for d in pool {
        // lower score is better in both modes
        let score = match mode {
            SelectionMode::Distance => haversine_km(here, LatLon::new(d.latitude, d.longitude))?,
            SelectionMode::Similarity => -profile_similarity(target.profile()?, d.profile()?)?,
        };
        let better = match best {
            None => true,
            Some((s, b)) => score < s || (score == s && d.device_id < b.device_id),
        };
        if better {
            best = Some((score, d));
        }
    }
    Ok(best.expect("pool is non-empty").1)
}


#[cfg(test)]
mod props {
    use super::*;
    use proptest::prelude::*;

    fn latlon() -> impl Strategy<Value = LatLon> {
        (-90.0f64..=90.0, -180.0f64..=180.0).prop_map(|(a, b)| LatLon::new(a, b))
    }

    fn profile() -> impl Strategy<Value = SpatialProfile> {
        proptest::collection::vec(0u32..100, Category::COUNT)
            .prop_filter("non-zero", |v| v.iter().any(|&x| x > 0))
            .prop_map(|v| {
                let s: u32 = v.iter().sum();
                let mut f = [0.0; Category::COUNT];
                for (o, x) in f.iter_mut().zip(&v) {
                    *o = *x as f64 / s as f64;
                }
                // normalise the rounding residue into the largest entry
                let r = 1.0 - f.iter().sum::<f64>();
                let i = (0..Category::COUNT).max_by(|&a, &b| f[a].total_cmp(&f[b])).unwrap();
                f[i] += r;
                SpatialProfile::new(f).unwrap()
            })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]

        #[test]
        fn haversine_symmetric(a in latlon(), b in latlon()) {
            prop_assert_eq!(haversine_km(a, b).unwrap(), haversine_km(b, a).unwrap());
        }

        #[test]
        fn similarity_symmetric(p in profile(), q in profile()) {
            prop_assert_eq!(profile_similarity(&p, &q).unwrap(), profile_similarity(&q, &p).unwrap());
        }

        #[test]
        fn raster_profile_sums_to_one(px in proptest::collection::vec(0usize..13, 1..200)) {
            let legend = ColorLegend::standard();
            let palette: Vec<Rgb> = legend.entries().iter().map(|(c, _)| *c).chain([[0, 0, 0]]).collect();
            let pixels: Vec<Rgb> = px.iter().map(|&i| palette[i]).collect();
            let img = Raster::new(pixels.len(), 1, pixels).unwrap();
            match profile_from_raster(&img, &legend) {
                Ok(p) => prop_assert!((p.fractions().iter().sum::<f64>() - 1.0).abs() <= 1e-9),
                Err(e) => prop_assert!(matches!(e, Error::LegendMismatch)),
            }
        }

        #[test]
        fn nearest_invariant_to_pool_order(
            coords in proptest::collection::vec((20.0f64..25.0, 85.0f64..90.0), 1..8),
            profiles in proptest::collection::vec(0usize..3, 8),
            rot in 0usize..8,
        ) {
            let shapes = [Category::Park, Category::Water, Category::Highway];
            let pool: Vec<DeviceMeta> = coords.iter().enumerate().map(|(i, (la, lo))| DeviceMeta {
                device_id: format!("d{i}"),
                latitude: *la,
                longitude: *lo,
                city_tag: "x".into(),
                spatial_profile: Some(SpatialProfile::pure(shapes[profiles[i]])),
            }).collect();
            let target = DeviceMeta {
                device_id: "t".into(), latitude: 22.5, longitude: 87.5, city_tag: "x".into(),
                spatial_profile: Some(SpatialProfile::pure(Category::Park)),
            };
            let mut rotated = pool.clone();
            rotated.rotate_left(rot % pool.len());
            rotated.reverse();
            for mode in [SelectionMode::Distance, SelectionMode::Similarity] {
                prop_assert_eq!(
                    &nearest_device(&target, &pool, mode).unwrap().device_id,
                    &nearest_device(&target, &rotated, mode).unwrap().device_id
                );
            }
        }
    }
}
