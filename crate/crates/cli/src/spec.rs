//! Parsers for knot-grid and target-grid specifications.

use frk::geometry::{place_knots, Domain, KnotLayout, KnotScheme, Location};

use crate::UsageError;

/// A knot grid `[BOUNDS:]COUNTS`. BOUNDS is `lo,hi` (1-D) or
/// `xlo,xhi,ylo,yhi` (2-D) and defaults to the data's bounding box. COUNTS
/// lists per-resolution counts; a single count with `resolutions` > 1 is
/// refined by halving the spacing at each level.
#[derive(Debug, Clone, PartialEq)]
pub struct KnotGrid {
    pub bounds: Option<Vec<f64>>,
    pub counts: Vec<usize>,
}

fn usage(msg: String) -> anyhow::Error {
    UsageError(msg).into()
}

fn numbers<T: std::str::FromStr>(s: &str, what: &str) -> anyhow::Result<Vec<T>> {
    s.split(',')
        .map(|t| {
            t.trim()
                .parse::<T>()
                .map_err(|_| usage(format!("bad {what} '{t}' in '{s}'")))
        })
        .collect()
}

impl std::str::FromStr for KnotGrid {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> anyhow::Result<Self> {
        let (bounds, counts) = match s.rsplit_once(':') {
            Some((b, c)) => (Some(numbers::<f64>(b, "bound")?), c),
            None => (None, s),
        };
        if let Some(b) = &bounds {
            if b.len() != 2 && b.len() != 4 {
                return Err(usage(format!("knot-grid bounds need 2 or 4 numbers, got {}", b.len())));
            }
        }
        let counts = numbers::<usize>(counts, "knot count")?;
        Ok(KnotGrid { bounds, counts })
    }
}

impl KnotGrid {
    pub fn counts_for(&self, resolutions: Option<usize>) -> anyhow::Result<Vec<usize>> {
        match (self.counts.as_slice(), resolutions) {
            (_, Some(0)) => Err(usage("--resolutions must be at least 1".into())),
            (&[c], Some(l)) => Ok((0..l)
                .scan(c, |c, _| {
                    let out = *c;
                    *c = 2 * *c - 1;
                    Some(out)
                })
                .collect()),
            (counts, Some(l)) if counts.len() != l => Err(usage(format!(
                "--resolutions {l} does not match the {} counts in --knot-grid",
                counts.len()
            ))),
            (counts, _) => Ok(counts.to_vec()),
        }
    }

    pub fn layout(&self, data: &[Location], resolutions: Option<usize>) -> anyhow::Result<KnotLayout> {
        let dim = data.first().map_or(1, |l| l.dim());
        let bounds = match &self.bounds {
            Some(b) => b.clone(),
            None => bounding_box(data),
        };
        let counts = self.counts_for(resolutions)?;
        let (domain, scheme) = match (dim, bounds.len()) {
            (1, 2) => (
                Domain::Interval {
                    lo: bounds[0],
                    hi: bounds[1],
                },
                KnotScheme::Regular1d,
            ),
            (2, 4) => (
                Domain::Rect {
                    x: (bounds[0], bounds[1]),
                    y: (bounds[2], bounds[3]),
                },
                KnotScheme::Triangular2d,
            ),
            _ => {
                return Err(usage(format!(
                    "knot-grid bounds have {} numbers but the data are {dim}-D",
                    bounds.len()
                )))
            }
        };
        Ok(place_knots(&domain, &counts, scheme)?)
    }
}

fn bounding_box(data: &[Location]) -> Vec<f64> {
    let dim = data.first().map_or(1, |l| l.dim());
    (0..dim)
        .flat_map(|d| {
            let lo = data.iter().map(|l| l.coords()[d]).fold(f64::INFINITY, f64::min);
            let hi = data.iter().map(|l| l.coords()[d]).fold(f64::NEG_INFINITY, f64::max);
            [lo, hi]
        })
        .collect()
}

/// A target grid `lo:hi:step[,lo:hi:step]`, one triple per dimension.
pub fn parse_target_grid(s: &str) -> anyhow::Result<Vec<Location>> {
    let axes = s
        .split(',')
        .map(|axis| {
            let v: Vec<f64> = axis
                .split(':')
                .map(|t| {
                    t.trim()
                        .parse::<f64>()
                        .map_err(|_| usage(format!("bad grid value '{t}' in '{s}'")))
                })
                .collect::<anyhow::Result<_>>()?;
            let &[lo, hi, step] = v.as_slice() else {
                return Err(usage(format!("grid axis '{axis}' must be lo:hi:step")));
            };
            if !(step > 0.0 && hi >= lo && lo.is_finite() && hi.is_finite()) {
                return Err(usage(format!("grid axis '{axis}' needs lo <= hi and step > 0")));
            }
            let n = ((hi - lo) / step + 1e-9).floor() as usize + 1;
            Ok((0..n).map(|i| lo + step * i as f64).collect::<Vec<f64>>())
        })
        .collect::<anyhow::Result<Vec<_>>>()?;
    match axes.as_slice() {
        [x] => Ok(x.iter().map(|&v| Location::d1(v)).collect()),
        [x, y] => Ok(y
            .iter()
            .flat_map(|&yv| x.iter().map(move |&xv| Location::d2(xv, yv)))
            .collect()),
        _ => Err(usage(format!("grid '{s}' must have one or two axes"))),
    }
}
