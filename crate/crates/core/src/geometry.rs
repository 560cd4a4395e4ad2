//! Locations, distance metrics and knot layouts.

use std::io::{Read, Write};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Mean Earth radius in kilometres.
pub const EARTH_RADIUS_KM: f64 = 6371.0088;
/// Mean Earth radius in statute miles.
pub const EARTH_RADIUS_MILES: f64 = 3958.7613;

/// A point in a 1-D or 2-D domain. For great-circle distances the two
/// coordinates are (longitude, latitude) in degrees.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Location {
    coords: [f64; 2],
    dim: u8,
}

impl Location {
    pub fn d1(x: f64) -> Self {
        Location {
            coords: [x, 0.0],
            dim: 1,
        }
    }

    pub fn d2(x: f64, y: f64) -> Self {
        Location { coords: [x, y], dim: 2 }
    }

    pub fn from_slice(c: &[f64]) -> Result<Self> {
        match c {
            [x] => Ok(Self::d1(*x)),
            [x, y] => Ok(Self::d2(*x, *y)),
            _ => Err(Error::DimensionMismatch(format!(
                "locations must have 1 or 2 coordinates, got {}",
                c.len()
            ))),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim as usize
    }

    pub fn coords(&self) -> &[f64] {
        &self.coords[..self.dim()]
    }

    pub fn x(&self) -> f64 {
        self.coords[0]
    }

    pub fn y(&self) -> f64 {
        self.coords[1]
    }

    /// Bitwise coordinate equality (used for the overlap indicator).
    pub fn same_point(&self, other: &Location) -> bool {
        self.dim == other.dim
            && self
                .coords()
                .iter()
                .zip(other.coords())
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Metric {
    #[default]
    Euclidean,
    /// Haversine distance on a sphere of the given radius; the result is in
    /// the radius' units.
    GreatCircle { radius: f64 },
}

impl std::str::FromStr for Metric {
    type Err = Error;

    /// Parses `euclidean`, `greatcircle` or `greatcircle:RADIUS`.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim().to_ascii_lowercase();
        if s == "euclidean" {
            return Ok(Metric::Euclidean);
        }
        let rest = s
            .strip_prefix("greatcircle")
            .or_else(|| s.strip_prefix("great_circle"))
            .ok_or_else(|| Error::invalid(format!("unknown metric '{s}'")))?;
        if rest.is_empty() {
            return Ok(Metric::GreatCircle {
                radius: EARTH_RADIUS_KM,
            });
        }
        let radius: f64 = rest
            .strip_prefix(':')
            .and_then(|r| r.parse().ok())
            .ok_or_else(|| Error::invalid(format!("bad great-circle radius in '{s}'")))?;
        if !(radius > 0.0 && radius.is_finite()) {
            return Err(Error::invalid("great-circle radius must be positive"));
        }
        Ok(Metric::GreatCircle { radius })
    }
}

impl std::fmt::Display for Metric {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Metric::Euclidean => f.write_str("euclidean"),
            Metric::GreatCircle { radius } => write!(f, "greatcircle:{radius}"),
        }
    }
}

impl Metric {
    /// Checks a location is admissible under this metric.
    pub fn validate(&self, loc: &Location) -> Result<()> {
        if let Metric::GreatCircle { .. } = self {
            if loc.dim() != 2 {
                return Err(Error::DimensionMismatch(
                    "great-circle distance needs (longitude, latitude) pairs".into(),
                ));
            }
            let lat = loc.y();
            if !(-90.0..=90.0).contains(&lat) {
                return Err(Error::LatitudeOutOfRange(lat));
            }
        }
        Ok(())
    }

    /// Distance between two already-validated locations of equal dimension.
    #[inline]
    pub fn distance(&self, a: &Location, b: &Location) -> f64 {
        match *self {
            Metric::Euclidean => {
                if a.dim == 1 {
                    (a.coords[0] - b.coords[0]).abs()
                } else {
                    (a.coords[0] - b.coords[0]).hypot(a.coords[1] - b.coords[1])
                }
            }
            Metric::GreatCircle { radius } => haversine(a, b, radius),
        }
    }
}

fn haversine(a: &Location, b: &Location, radius: f64) -> f64 {
    if a.same_point(b) {
        return 0.0;
    }
    let (lon1, lat1) = (a.x().to_radians(), a.y().to_radians());
    let (lon2, lat2) = (b.x().to_radians(), b.y().to_radians());
    let dlat = (lat2 - lat1) * 0.5;
    let dlon = (lon2 - lon1) * 0.5;
    let h = dlat.sin().powi(2) + lat1.cos() * lat2.cos() * dlon.sin().powi(2);
    2.0 * radius * h.sqrt().min(1.0).asin()
}

/// Validates that every location has the same dimension and fits the metric.
/// Returns the common dimension.
pub fn check_locations(locs: &[Location], metric: &Metric) -> Result<usize> {
    let dim = match locs.first() {
        Some(l) => l.dim(),
        None => return Ok(0),
    };
    for l in locs {
        if l.dim() != dim {
            return Err(Error::DimensionMismatch(format!(
                "mixed {}-D and {}-D locations",
                dim,
                l.dim()
            )));
        }
        metric.validate(l)?;
    }
    Ok(dim)
}

/// Dense |a|×|b| distance matrix.
pub fn pairwise_distance(a: &[Location], b: &[Location], metric: &Metric) -> Result<DMatrix<f64>> {
    let da = check_locations(a, metric)?;
    let db = check_locations(b, metric)?;
    if !a.is_empty() && !b.is_empty() && da != db {
        return Err(Error::DimensionMismatch(format!("{da}-D versus {db}-D locations")));
    }
    Ok(DMatrix::from_fn(a.len(), b.len(), |i, j| metric.distance(&a[i], &b[j])))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Knot {
    pub location: Location,
    /// 1-based resolution index.
    pub resolution: usize,
}

/// Knots grouped by resolution. Knots are stored with resolutions in
/// increasing order and, within a resolution, in the order supplied; this
/// order fixes the column order of the basis matrix and of K.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KnotLayout {
    knots: Vec<Knot>,
}

impl KnotLayout {
    pub fn new(mut knots: Vec<Knot>) -> Result<Self> {
        if knots.is_empty() {
            return Err(Error::invalid("knot layout is empty"));
        }
        let dim = knots[0].location.dim();
        if knots.iter().any(|k| k.location.dim() != dim) {
            return Err(Error::DimensionMismatch("knots have mixed dimensionality".into()));
        }
        if knots.iter().any(|k| k.resolution == 0) {
            return Err(Error::invalid("resolution indices start at 1"));
        }
        knots.sort_by_key(|k| k.resolution);
        let layout = KnotLayout { knots };
        for l in layout.resolutions() {
            let members: Vec<_> = layout.knots_at(l).collect();
            if members.len() < 2 {
                return Err(Error::TooFewKnots {
                    resolution: l,
                    found: members.len(),
                });
            }
            for (i, a) in members.iter().enumerate() {
                if members[i + 1..].iter().any(|b| a.same_point(b)) {
                    return Err(Error::DuplicateKnots { resolution: l });
                }
            }
        }
        Ok(layout)
    }

    /// Single-resolution layout.
    pub fn single(locations: &[Location]) -> Result<Self> {
        Self::new(
            locations
                .iter()
                .map(|&location| Knot {
                    location,
                    resolution: 1,
                })
                .collect(),
        )
    }

    pub fn knots(&self) -> &[Knot] {
        &self.knots
    }

    pub fn len(&self) -> usize {
        self.knots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.knots.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.knots[0].location.dim()
    }

    /// Distinct resolution indices, ascending.
    pub fn resolutions(&self) -> Vec<usize> {
        let mut r: Vec<usize> = self.knots.iter().map(|k| k.resolution).collect();
        r.dedup();
        r
    }

    pub fn knots_at(&self, resolution: usize) -> impl Iterator<Item = &Location> + '_ {
        self.knots
            .iter()
            .filter(move |k| k.resolution == resolution)
            .map(|k| &k.location)
    }

    pub fn locations(&self) -> Vec<Location> {
        self.knots.iter().map(|k| k.location).collect()
    }

    /// Smallest distance between two distinct knots of one resolution.
    pub fn min_interknot_distance(&self, resolution: usize, metric: &Metric) -> Result<f64> {
        let members: Vec<&Location> = self.knots_at(resolution).collect();
        if members.len() < 2 {
            return Err(Error::TooFewKnots {
                resolution,
                found: members.len(),
            });
        }
        for k in &members {
            metric.validate(k)?;
        }
        let mut best = f64::INFINITY;
        for (i, a) in members.iter().enumerate() {
            for b in &members[i + 1..] {
                best = best.min(metric.distance(a, b));
            }
        }
        if best <= 0.0 {
            return Err(Error::DuplicateKnots { resolution });
        }
        Ok(best)
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        let header: &[&str] = if self.dim() == 1 {
            &["res", "coord1"]
        } else {
            &["res", "coord1", "coord2"]
        };
        out.write_record(header).map_err(csv_err)?;
        for k in &self.knots {
            let mut rec = vec![k.resolution.to_string()];
            rec.extend(k.location.coords().iter().map(|c| format!("{c:?}")));
            out.write_record(&rec).map_err(csv_err)?;
        }
        out.flush().map_err(|e| Error::data(None, e.to_string()))
    }

    pub fn read_csv<R: Read>(r: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(r);
        let headers = rdr.headers().map_err(csv_err)?.clone();
        let ncols = headers.len();
        if !(ncols == 2 || ncols == 3) || &headers[0] != "res" {
            return Err(Error::data(Some(1), "knot CSV header must be res,coord1[,coord2]"));
        }
        let mut knots = Vec::new();
        for (i, rec) in rdr.records().enumerate() {
            let line = i + 2;
            let rec = rec.map_err(|e| Error::data(Some(line), e.to_string()))?;
            let res: usize = rec[0]
                .parse()
                .map_err(|_| Error::data(Some(line), format!("bad resolution '{}'", &rec[0])))?;
            let coords = (1..ncols)
                .map(|j| {
                    rec[j]
                        .parse::<f64>()
                        .map_err(|_| Error::data(Some(line), format!("bad coordinate '{}'", &rec[j])))
                })
                .collect::<Result<Vec<_>>>()?;
            knots.push(Knot {
                location: Location::from_slice(&coords)?,
                resolution: res,
            });
        }
        Self::new(knots)
    }
}

fn csv_err(e: csv::Error) -> Error {
    let line = e.position().map(|p| p.line() as usize);
    Error::data(line, e.to_string())
}

/// Region over which knots are laid out.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Domain {
    /// The integer grid {first, ..., last}; each point owns a unit cell so
    /// the covered interval is [first - 0.5, last + 0.5].
    IntegerGrid {
        first: i64,
        last: i64,
    },
    Interval {
        lo: f64,
        hi: f64,
    },
    Rect {
        x: (f64, f64),
        y: (f64, f64),
    },
}

impl Domain {
    fn interval(&self) -> Result<(f64, f64)> {
        let (lo, hi) = match *self {
            Domain::IntegerGrid { first, last } => (first as f64 - 0.5, last as f64 + 0.5),
            Domain::Interval { lo, hi } => (lo, hi),
            Domain::Rect { .. } => return Err(Error::invalid("regular 1-D layout needs a 1-D domain")),
        };
        if !(hi > lo) {
            return Err(Error::EmptyDomain);
        }
        Ok((lo, hi))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KnotScheme {
    Regular1d,
    /// Equilateral triangular lattice; odd rows are shifted by half the
    /// horizontal spacing.
    Triangular2d,
}

/// Lays out knots per resolution. For `Regular1d`, `counts[l]` knots span the
/// domain endpoints. For `Triangular2d`, `counts[l]` is the number of knots
/// on an unshifted row spanning the x-range; row spacing is √3/2 of the
/// horizontal spacing and rows are centred in the y-range.
pub fn place_knots(domain: &Domain, counts: &[usize], scheme: KnotScheme) -> Result<KnotLayout> {
    if counts.is_empty() {
        return Err(Error::invalid("at least one resolution is required"));
    }
    if let Some(&c) = counts.iter().find(|&&c| c < 2) {
        return Err(Error::invalid(format!(
            "each resolution needs at least 2 knots, got {c}"
        )));
    }
    let mut knots = Vec::new();
    for (l, &count) in counts.iter().enumerate() {
        let resolution = l + 1;
        match scheme {
            KnotScheme::Regular1d => {
                let (lo, hi) = domain.interval()?;
                let step = (hi - lo) / (count - 1) as f64;
                knots.extend((0..count).map(|i| Knot {
                    location: Location::d1(if i + 1 == count { hi } else { lo + step * i as f64 }),
                    resolution,
                }));
            }
            KnotScheme::Triangular2d => {
                let Domain::Rect {
                    x: (x0, x1),
                    y: (y0, y1),
                } = *domain
                else {
                    return Err(Error::invalid("triangular layout needs a rectangular domain"));
                };
                if !(x1 > x0) || !(y1 >= y0) {
                    return Err(Error::EmptyDomain);
                }
                let hx = (x1 - x0) / (count - 1) as f64;
                let hy = hx * 3f64.sqrt() / 2.0;
                let rows = ((y1 - y0) / hy).floor() as usize + 1;
                let y_start = y0 + 0.5 * ((y1 - y0) - hy * (rows - 1) as f64);
                for r in 0..rows {
                    let y = y_start + hy * r as f64;
                    let (offset, n_row) = if r % 2 == 0 {
                        (0.0, count)
                    } else {
                        (0.5 * hx, count - 1)
                    };
                    knots.extend((0..n_row).map(|i| Knot {
                        location: Location::d2(x0 + offset + hx * i as f64, y),
                        resolution,
                    }));
                }
            }
        }
    }
    KnotLayout::new(knots)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn paper_knots() -> KnotLayout {
        place_knots(
            &Domain::IntegerGrid { first: 1, last: 256 },
            &[5],
            KnotScheme::Regular1d,
        )
        .unwrap()
    }

    #[test]
    fn euclidean_1d_is_absolute_difference() {
        let d = pairwise_distance(&[Location::d1(1.0)], &[Location::d1(65.0)], &Metric::Euclidean).unwrap();
        assert_eq!(d[(0, 0)], 64.0);
    }

    #[test]
    fn great_circle_quarter_circle() {
        let m = Metric::GreatCircle { radius: 3963.0 };
        let a = Location::d2(0.0, 0.0);
        let b = Location::d2(90.0, 0.0);
        assert_eq!(m.distance(&a, &a), 0.0);
        // quarter of the circumference
        assert_relative_eq!(
            m.distance(&a, &b),
            std::f64::consts::FRAC_PI_2 * 3963.0,
            max_relative = 1e-12
        );
        assert_relative_eq!(m.distance(&a, &b), 6225.0, epsilon = 0.5);
    }

    #[test]
    fn great_circle_rejects_bad_latitude_and_1d() {
        let m = Metric::GreatCircle { radius: 1.0 };
        assert!(matches!(
            pairwise_distance(&[Location::d2(0.0, 91.0)], &[Location::d2(0.0, 0.0)], &m),
            Err(Error::LatitudeOutOfRange(_))
        ));
        assert!(matches!(
            pairwise_distance(&[Location::d1(0.0)], &[Location::d1(0.0)], &m),
            Err(Error::DimensionMismatch(_))
        ));
    }

    #[test]
    fn mixed_dimensions_rejected() {
        let r = pairwise_distance(&[Location::d1(0.0)], &[Location::d2(0.0, 1.0)], &Metric::Euclidean);
        assert!(matches!(r, Err(Error::DimensionMismatch(_))));
    }

    #[test]
    fn paper_knot_layout() {
        let k = paper_knots();
        let xs: Vec<f64> = k.knots().iter().map(|k| k.location.x()).collect();
        assert_eq!(xs, vec![0.5, 64.5, 128.5, 192.5, 256.5]);
        assert_eq!(k.min_interknot_distance(1, &Metric::Euclidean).unwrap(), 64.0);
    }

    #[test]
    fn unit_interval_two_knots() {
        let k = place_knots(&Domain::Interval { lo: 0.0, hi: 1.0 }, &[2], KnotScheme::Regular1d).unwrap();
        let xs: Vec<f64> = k.knots().iter().map(|k| k.location.x()).collect();
        assert_eq!(xs, vec![0.0, 1.0]);
    }

    #[test]
    fn empty_domain_rejected() {
        let r = place_knots(&Domain::Interval { lo: 1.0, hi: 1.0 }, &[3], KnotScheme::Regular1d);
        assert!(matches!(r, Err(Error::EmptyDomain)));
    }

    #[test]
    fn two_knots_distance() {
        let k = KnotLayout::single(&[Location::d1(0.0), Location::d1(5.0)]).unwrap();
        assert_eq!(k.min_interknot_distance(1, &Metric::Euclidean).unwrap(), 5.0);
    }

    #[test]
    fn duplicate_and_lonely_knots_rejected() {
        let dup = KnotLayout::single(&[Location::d1(2.0), Location::d1(2.0), Location::d1(3.0)]);
        assert!(matches!(dup, Err(Error::DuplicateKnots { resolution: 1 })));
        let lonely = KnotLayout::new(vec![
            Knot {
                location: Location::d1(0.0),
                resolution: 1,
            },
            Knot {
                location: Location::d1(1.0),
                resolution: 1,
            },
            Knot {
                location: Location::d1(0.5),
                resolution: 2,
            },
        ]);
        assert!(matches!(
            lonely,
            Err(Error::TooFewKnots {
                resolution: 2,
                found: 1
            })
        ));
    }

    #[test]
    fn resolutions_are_sorted_stably() {
        let k = KnotLayout::new(vec![
            Knot {
                location: Location::d1(9.0),
                resolution: 2,
            },
            Knot {
                location: Location::d1(0.0),
                resolution: 1,
            },
            Knot {
                location: Location::d1(7.0),
                resolution: 2,
            },
            Knot {
                location: Location::d1(1.0),
                resolution: 1,
            },
        ])
        .unwrap();
        let xs: Vec<f64> = k.knots().iter().map(|k| k.location.x()).collect();
        assert_eq!(xs, vec![0.0, 1.0, 9.0, 7.0]);
        assert_eq!(k.resolutions(), vec![1, 2]);
    }

    #[test]
    fn triangular_grid_is_equilateral() {
        let dom = Domain::Rect {
            x: (0.0, 10.0),
            y: (0.0, 10.0),
        };
        let k = place_knots(&dom, &[6], KnotScheme::Triangular2d).unwrap();
        let locs = k.locations();
        let hx = 2.0;
        // row 0 has 6 knots, row 1 has 5 shifted by hx/2
        assert_eq!(locs[0].x(), 0.0);
        assert_relative_eq!(locs[6].x() - locs[0].x(), hx / 2.0, epsilon = 1e-12);
        // nearest neighbour distance is the same within and across rows
        let d = pairwise_distance(&locs, &locs, &Metric::Euclidean).unwrap();
        for i in 0..locs.len() {
            let nn = (0..locs.len())
                .filter(|&j| j != i)
                .map(|j| d[(i, j)])
                .fold(f64::INFINITY, f64::min);
            assert_relative_eq!(nn, hx, epsilon = 1e-9);
        }
        assert_relative_eq!(
            k.min_interknot_distance(1, &Metric::Euclidean).unwrap(),
            hx,
            epsilon = 1e-12
        );
    }

    #[test]
    fn knot_csv_roundtrip() {
        let dom = Domain::Rect {
            x: (-120.0, -70.0),
            y: (25.0, 49.0),
        };
        let k = place_knots(&dom, &[4, 7], KnotScheme::Triangular2d).unwrap();
        let mut buf = Vec::new();
        k.write_csv(&mut buf).unwrap();
        assert!(String::from_utf8_lossy(&buf).starts_with("res,coord1,coord2\n"));
        assert_eq!(KnotLayout::read_csv(&buf[..]).unwrap(), k);
    }

    #[test]
    fn knot_csv_reports_line() {
        let text = "res,coord1\n1,0.0\n1,abc\n";
        match KnotLayout::read_csv(text.as_bytes()) {
            Err(Error::Data { line: Some(3), .. }) => {}
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn metric_parsing() {
        assert_eq!("euclidean".parse::<Metric>().unwrap(), Metric::Euclidean);
        assert_eq!(
            "greatcircle:3963".parse::<Metric>().unwrap(),
            Metric::GreatCircle { radius: 3963.0 }
        );
        assert!("manhattan".parse::<Metric>().is_err());
    }

    fn loc2() -> impl Strategy<Value = Location> {
        (-180.0..180.0f64, -90.0..=90.0f64).prop_map(|(x, y)| Location::d2(x, y))
    }

    proptest! {
        #[test]
        fn triangle_inequality_euclidean(a in loc2(), b in loc2(), c in loc2()) {
            let m = Metric::Euclidean;
            let (ab, bc, ac) = (m.distance(&a, &b), m.distance(&b, &c), m.distance(&a, &c));
            prop_assert!(ac <= (ab + bc) * (1.0 + 1e-12) + 1e-12);
        }

        #[test]
        fn triangle_inequality_great_circle(a in loc2(), b in loc2(), c in loc2()) {
            let m = Metric::GreatCircle { radius: EARTH_RADIUS_KM };
            let (ab, bc, ac) = (m.distance(&a, &b), m.distance(&b, &c), m.distance(&a, &c));
            prop_assert!(ac <= (ab + bc) * (1.0 + 1e-12) + 1e-9);
        }

        #[test]
        fn self_distance_matrix(pts in proptest::collection::vec(loc2(), 1..12)) {
            for m in [Metric::Euclidean, Metric::GreatCircle { radius: 1.0 }] {
                let d = pairwise_distance(&pts, &pts, &m).unwrap();
                for i in 0..pts.len() {
                    prop_assert_eq!(d[(i, i)], 0.0);
                    for j in 0..pts.len() {
                        prop_assert!(d[(i, j)] >= 0.0);
                        prop_assert_eq!(d[(i, j)], d[(j, i)]);
                    }
                }
            }
        }

        #[test]
        fn min_distance_permutation_invariant(mut xs in proptest::collection::hash_set(-1000i32..1000, 2..20)
            .prop_map(|s| s.into_iter().map(|v| v as f64 * 0.5).collect::<Vec<_>>()), seed in any::<u64>()) {
            let base = KnotLayout::single(&xs.iter().map(|&x| Location::d1(x)).collect::<Vec<_>>()).unwrap();
            let d0 = base.min_interknot_distance(1, &Metric::Euclidean).unwrap();
            let n = xs.len();
            xs.rotate_left((seed as usize) % n);
            xs.reverse();
            let perm = KnotLayout::single(&xs.iter().map(|&x| Location::d1(x)).collect::<Vec<_>>()).unwrap();
            prop_assert_eq!(perm.min_interknot_distance(1, &Metric::Euclidean).unwrap(), d0);
        }
    }
}
