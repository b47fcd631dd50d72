//! Input perturbations: additive noise for any input, masks and resolution
//! loss for grid inputs.
//!
//! Grid samples are stored row-major as `[height][width][channels]`.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::NoiseStream;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Grid {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl Grid {
    pub fn new(height: usize, width: usize, channels: usize) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(Error::InvalidArgument(format!(
                "grid extents must be positive, got {height}x{width}x{channels}"
            )));
        }
        Ok(Self {
            height,
            width,
            channels,
        })
    }

    pub fn len(&self) -> usize {
        self.height * self.width * self.channels
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn at(&self, r: usize, c: usize, ch: usize) -> usize {
        (r * self.width + c) * self.channels + ch
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Orientation {
    #[default]
    Vertical,
    Horizontal,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "variant", rename_all = "snake_case")]
pub enum PerturbationSpec {
    Gaussian { sigma: f64 },
    Uniform { amplitude: f64 },
    Occlusion { n_patches: usize, patch_h: usize, patch_w: usize, fill: f64 },
    Stripes { n_stripes: usize, thickness: usize, orientation: Orientation },
    DuSample { factor: usize },
    Clamp { lo: f64, hi: f64 },
    Compose { steps: Vec<PerturbationSpec> },
}

impl PerturbationSpec {
    pub fn gaussian(sigma: f64) -> Self {
        Self::Gaussian { sigma }
    }

    fn name(&self) -> &'static str {
        match self {
            Self::Gaussian { .. } => "gaussian",
            Self::Uniform { .. } => "uniform",
            Self::Occlusion { .. } => "occlusion",
            Self::Stripes { .. } => "stripes",
            Self::DuSample { .. } => "du",
            Self::Clamp { .. } => "clamp",
            Self::Compose { .. } => "compose",
        }
    }

    /// Checks parameters, and extents against `grid` when one is given.
    pub fn validate(&self, grid: Option<&Grid>) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        let need_grid = |variant| match grid {
            Some(g) => Ok(*g),
            None => Err(Error::NeedsGrid {
                variant,
                shape: Vec::new(),
            }),
        };
        match self {
            Self::Gaussian { sigma } if !(*sigma >= 0.0) || !sigma.is_finite() => {
                bad(format!("gaussian sigma must be >= 0, got {sigma}"))
            }
            Self::Uniform { amplitude } if !(*amplitude > 0.0) || !amplitude.is_finite() => {
                bad(format!("uniform amplitude must be > 0, got {amplitude}"))
            }
            Self::Gaussian { .. } | Self::Uniform { .. } => Ok(()),
            Self::Occlusion {
                patch_h, patch_w, ..
            } => {
                let g = need_grid("occlusion")?;
                if *patch_h == 0 || *patch_w == 0 || *patch_h > g.height || *patch_w > g.width {
                    return bad(format!(
                        "patch {}x{} does not fit a {}x{} grid",
                        patch_h, patch_w, g.height, g.width
                    ));
                }
                Ok(())
            }
            Self::Stripes {
                thickness,
                orientation,
                ..
            } => {
                let g = need_grid("stripes")?;
                let span = match orientation {
                    Orientation::Vertical => g.width,
                    Orientation::Horizontal => g.height,
                };
                if *thickness == 0 || *thickness > span {
                    return bad(format!("stripe thickness {thickness} does not fit extent {span}"));
                }
                Ok(())
            }
            Self::DuSample { factor } => {
                need_grid("du")?;
                if *factor < 2 {
                    return bad(format!("down factor must be >= 2, got {factor}"));
                }
                Ok(())
            }
            Self::Clamp { lo, hi } => {
                need_grid("clamp")?;
                if !(lo <= hi) {
                    return bad(format!("clamp range [{lo}, {hi}] is empty"));
                }
                Ok(())
            }
            Self::Compose { steps } => steps.iter().try_for_each(|s| s.validate(grid)),
        }
    }

    /// Parses the compact form used on the command line, e.g. `gaussian:0.1`,
    /// `occlusion:20:4:4:0`, `stripes:10:1:vertical`, `du:3`, `clamp:0:1`;
    /// `+` composes left to right.
    pub fn parse(text: &str) -> Result<Self> {
        let parts: Vec<&str> = text.split('+').map(str::trim).collect();
        if parts.len() > 1 {
            return Ok(Self::Compose {
                steps: parts.into_iter().map(Self::parse).collect::<Result<_>>()?,
            });
        }
        let mut fields = text.trim().split(':');
        let kind = fields.next().unwrap_or_default();
        let args: Vec<&str> = fields.collect();
        let bad = || Error::InvalidArgument(format!("cannot parse perturbation `{text}`"));
        let num = |i: usize| -> Result<f64> { args.get(i).ok_or_else(bad)?.parse().map_err(|_| bad()) };
        let int = |i: usize| -> Result<usize> { args.get(i).ok_or_else(bad)?.parse().map_err(|_| bad()) };
        let arity = |n: usize| if args.len() == n { Ok(()) } else { Err(bad()) };
        let spec = match kind {
            "gaussian" => {
                arity(1)?;
                Self::Gaussian { sigma: num(0)? }
            }
            "uniform" => {
                arity(1)?;
                Self::Uniform { amplitude: num(0)? }
            }
            "occlusion" => {
                if args.len() != 3 && args.len() != 4 {
                    return Err(bad());
                }
                Self::Occlusion {
                    n_patches: int(0)?,
                    patch_h: int(1)?,
                    patch_w: int(2)?,
                    fill: if args.len() == 4 { num(3)? } else { 0.0 },
                }
            }
            "stripes" => {
                let orientation = match args.get(2).copied() {
                    None if args.len() == 2 => Orientation::Vertical,
                    Some("vertical") if args.len() == 3 => Orientation::Vertical,
                    Some("horizontal") if args.len() == 3 => Orientation::Horizontal,
                    _ => return Err(bad()),
                };
                Self::Stripes {
                    n_stripes: int(0)?,
                    thickness: int(1)?,
                    orientation,
                }
            }
            "du" => {
                arity(1)?;
                Self::DuSample { factor: int(0)? }
            }
            "clamp" => {
                arity(2)?;
                Self::Clamp { lo: num(0)?, hi: num(1)? }
            }
            _ => return Err(bad()),
        };
        Ok(spec)
    }

    /// Highest Gaussian sigma in this spec, 0 when it has none.
    pub fn gaussian_sigma(&self) -> f64 {
        match self {
            Self::Gaussian { sigma } => *sigma,
            Self::Compose { steps } => steps.iter().map(Self::gaussian_sigma).fold(0.0, f64::max),
            _ => 0.0,
        }
    }
}

impl fmt::Display for PerturbationSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Gaussian { sigma } => write!(f, "gaussian:{sigma}"),
            Self::Uniform { amplitude } => write!(f, "uniform:{amplitude}"),
            Self::Occlusion {
                n_patches,
                patch_h,
                patch_w,
                fill,
            } => write!(f, "occlusion:{n_patches}:{patch_h}:{patch_w}:{fill}"),
            Self::Stripes {
                n_stripes,
                thickness,
                orientation,
            } => {
                let o = match orientation {
                    Orientation::Vertical => "vertical",
                    Orientation::Horizontal => "horizontal",
                };
                write!(f, "stripes:{n_stripes}:{thickness}:{o}")
            }
            Self::DuSample { factor } => write!(f, "du:{factor}"),
            Self::Clamp { lo, hi } => write!(f, "clamp:{lo}:{hi}"),
            Self::Compose { steps } => {
                for (k, s) in steps.iter().enumerate() {
                    if k > 0 {
                        f.write_str("+")?;
                    }
                    write!(f, "{s}")?;
                }
                Ok(())
            }
        }
    }
}

/// Applies `spec` to one sample. `grid` describes the sample layout and is
/// required by the mask, resolution and clamp variants.
pub fn apply(spec: &PerturbationSpec, input: &[f64], grid: Option<&Grid>, rng: &mut NoiseStream) -> Result<Vec<f64>> {
    let mut out = input.to_vec();
    apply_in_place(spec, &mut out, grid, rng)?;
    Ok(out)
}

fn grid_for(spec: &PerturbationSpec, len: usize, grid: Option<&Grid>) -> Result<Grid> {
    match grid {
        Some(g) if g.len() == len => Ok(*g),
        Some(g) => Err(Error::Dimension(format!(
            "sample of {} values for a {}x{}x{} grid",
            len, g.height, g.width, g.channels
        ))),
        None => Err(Error::NeedsGrid {
            variant: spec.name(),
            shape: vec![len],
        }),
    }
}

pub fn apply_in_place(spec: &PerturbationSpec, x: &mut [f64], grid: Option<&Grid>, rng: &mut NoiseStream) -> Result<()> {
    if !matches!(
        spec,
        PerturbationSpec::Gaussian { .. } | PerturbationSpec::Uniform { .. } | PerturbationSpec::Compose { .. }
    ) {
        let g = grid_for(spec, x.len(), grid)?;
        spec.validate(Some(&g))?;
    } else {
        spec.validate(grid)?;
    }
    match spec {
        PerturbationSpec::Gaussian { sigma } => {
            if *sigma > 0.0 {
                for v in x.iter_mut() {
                    *v += sigma * rng.normal();
                }
            }
        }
        PerturbationSpec::Uniform { amplitude } => {
            for v in x.iter_mut() {
                *v += rng.uniform(-amplitude, *amplitude);
            }
        }
        PerturbationSpec::Occlusion {
            n_patches,
            patch_h,
            patch_w,
            fill,
        } => {
            let g = grid_for(spec, x.len(), grid)?;
            for _ in 0..*n_patches {
                let top = rng.below(g.height - patch_h + 1);
                let left = rng.below(g.width - patch_w + 1);
                for r in top..top + patch_h {
                    for c in left..left + patch_w {
                        for ch in 0..g.channels {
                            x[g.at(r, c, ch)] = *fill;
                        }
                    }
                }
            }
        }
        PerturbationSpec::Stripes {
            n_stripes,
            thickness,
            orientation,
        } => {
            let g = grid_for(spec, x.len(), grid)?;
            for _ in 0..*n_stripes {
                match orientation {
                    Orientation::Vertical => {
                        let start = rng.below(g.width - thickness + 1);
                        for r in 0..g.height {
                            for c in start..start + thickness {
                                for ch in 0..g.channels {
                                    x[g.at(r, c, ch)] = 0.0;
                                }
                            }
                        }
                    }
                    Orientation::Horizontal => {
                        let start = rng.below(g.height - thickness + 1);
                        for r in start..start + thickness {
                            for c in 0..g.width {
                                for ch in 0..g.channels {
                                    x[g.at(r, c, ch)] = 0.0;
                                }
                            }
                        }
                    }
                }
            }
        }
        PerturbationSpec::DuSample { factor } => {
            let g = grid_for(spec, x.len(), grid)?;
            du_sample(x, &g, *factor);
        }
        PerturbationSpec::Clamp { lo, hi } => {
            for v in x.iter_mut() {
                *v = v.clamp(*lo, *hi);
            }
        }
        PerturbationSpec::Compose { steps } => {
            for s in steps {
                apply_in_place(s, x, grid, rng)?;
            }
        }
    }
    Ok(())
}

/// Block-average `k×k` cells (edge blocks may be smaller) and write each
/// average back over its block.
fn du_sample(x: &mut [f64], g: &Grid, k: usize) {
    for br in (0..g.height).step_by(k) {
        for bc in (0..g.width).step_by(k) {
            let rows = br..(br + k).min(g.height);
            let cols = bc..(bc + k).min(g.width);
            let count = (rows.len() * cols.len()) as f64;
            for ch in 0..g.channels {
                let mut s = 0.0;
                for r in rows.clone() {
                    for c in cols.clone() {
                        s += x[g.at(r, c, ch)];
                    }
                }
                let mean = s / count;
                for r in rows.clone() {
                    for c in cols.clone() {
                        x[g.at(r, c, ch)] = mean;
                    }
                }
            }
        }
    }
}

/// Perturbs sample `index` with its own stream keyed by `(seed, index)`.
pub fn apply_keyed(
    spec: &PerturbationSpec,
    input: &[f64],
    grid: Option<&Grid>,
    seed: u64,
    index: u64,
) -> Result<Vec<f64>> {
    apply(spec, input, grid, &mut NoiseStream::keyed(seed, index))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn g(h: usize, w: usize) -> Grid {
        Grid::new(h, w, 1).unwrap()
    }

    #[test]
    fn du_sample_constant_and_idempotent() {
        let grid = g(8, 7);
        let x = vec![0.25; grid.len()];
        let y = apply_keyed(&PerturbationSpec::DuSample { factor: 3 }, &x, Some(&grid), 1, 0).unwrap();
        assert_eq!(x, y);
        let mut rng = NoiseStream::keyed(5, 0);
        let z: Vec<f64> = (0..grid.len()).map(|_| rng.normal()).collect();
        let once = apply_keyed(&PerturbationSpec::DuSample { factor: 3 }, &z, Some(&grid), 1, 0).unwrap();
        let twice = apply_keyed(&PerturbationSpec::DuSample { factor: 3 }, &once, Some(&grid), 1, 0).unwrap();
        for (a, b) in once.iter().zip(&twice) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn full_patch_zeroes_grid() {
        let grid = Grid::new(5, 6, 2).unwrap();
        let spec = PerturbationSpec::Occlusion {
            n_patches: 1,
            patch_h: 5,
            patch_w: 6,
            fill: 0.0,
        };
        let y = apply_keyed(&spec, &vec![1.0; grid.len()], Some(&grid), 3, 0).unwrap();
        assert!(y.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn grid_only_variants_reject_vectors_and_oversized_patches() {
        let spec = PerturbationSpec::DuSample { factor: 2 };
        assert!(matches!(apply_keyed(&spec, &[1.0; 4], None, 0, 0), Err(Error::NeedsGrid { .. })));
        let big = PerturbationSpec::Occlusion {
            n_patches: 1,
            patch_h: 9,
            patch_w: 1,
            fill: 0.0,
        };
        assert!(apply_keyed(&big, &[0.0; 64], Some(&g(8, 8)), 0, 0).is_err());
    }

    #[test]
    fn zero_sigma_is_identity() {
        let x = vec![0.3, -1.0, 2.5];
        assert_eq!(apply_keyed(&PerturbationSpec::gaussian(0.0), &x, None, 9, 4).unwrap(), x);
    }

    #[test]
    fn stripes_change_bounded_count() {
        let grid = Grid::new(10, 12, 3).unwrap();
        let spec = PerturbationSpec::Stripes {
            n_stripes: 2,
            thickness: 2,
            orientation: Orientation::Vertical,
        };
        let y = apply_keyed(&spec, &vec![1.0; grid.len()], Some(&grid), 7, 0).unwrap();
        let changed = y.iter().filter(|&&v| v != 1.0).count();
        assert!(changed > 0 && changed <= 2 * 2 * 10 * 3);
    }

    #[test]
    fn parse_round_trip() {
        for text in [
            "gaussian:0.1",
            "uniform:0.2",
            "occlusion:20:4:4:0",
            "stripes:10:1:vertical",
            "du:3",
            "du:3+occlusion:5:3:3:0.5",
            "clamp:0:1",
        ] {
            let s = PerturbationSpec::parse(text).unwrap();
            assert_eq!(s.to_string(), text);
            assert_eq!(PerturbationSpec::parse(&s.to_string()).unwrap(), s);
        }
        assert!(PerturbationSpec::parse("blur:2").is_err());
        assert!(PerturbationSpec::parse("gaussian").is_err());
    }
}
