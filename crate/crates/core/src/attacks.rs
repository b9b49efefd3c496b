//! Test-time perturbations with a deterministic amount of information loss.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::augment::patch_mix;
use crate::error::{Error, Result};
use crate::grid::{make_grid, sample_patch_mask, GridSpec, PatchGrid, PatchMask};
use crate::image::ImageTensor;
use crate::rng::SeededRng;

/// Highest information loss the attack sweeps evaluate.
pub const MAX_LOSS: f64 = 0.8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackKind {
    #[serde(alias = "patch_mix_attack")]
    Mix,
    #[serde(alias = "patch_drop")]
    Drop,
    #[serde(alias = "patch_permute")]
    Permute,
}

impl fmt::Display for AttackKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AttackKind::Mix => "mix",
            AttackKind::Drop => "drop",
            AttackKind::Permute => "permute",
        })
    }
}

impl FromStr for AttackKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mix" | "patch_mix_attack" => Ok(AttackKind::Mix),
            "drop" | "patch_drop" => Ok(AttackKind::Drop),
            "permute" | "patch_permute" => Ok(AttackKind::Permute),
            other => Err(Error::InvalidArgument(format!("unknown attack kind {other:?}"))),
        }
    }
}

/// Value written into dropped patches.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum DropFill {
    Constant(f64),
    PerChannel(Vec<f64>),
}

impl Default for DropFill {
    fn default() -> Self {
        DropFill::Constant(0.0)
    }
}

impl DropFill {
    fn values(&self, channels: usize) -> Result<Vec<f64>> {
        let v = match self {
            DropFill::Constant(c) => vec![*c; channels],
            DropFill::PerChannel(v) if v.len() == channels => v.clone(),
            DropFill::PerChannel(v) => {
                return Err(Error::shape(format!("{channels} fill values"), v.len()))
            }
        };
        if v.iter().any(|s| !(0.0..=1.0).contains(s)) {
            return Err(Error::InvalidArgument(format!("fill {v:?} outside [0, 1]")));
        }
        Ok(v)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackSpec {
    pub kind: AttackKind,
    pub grid: GridSpec,
    /// Fraction of patches replaced or dropped; ignored by permute.
    pub loss: f64,
    #[serde(default)]
    pub fill: DropFill,
    pub seed: u64,
}

impl AttackSpec {
    /// Validated spec; loss must lie in `[0, MAX_LOSS]`.
    pub fn new(kind: AttackKind, grid: GridSpec, loss: f64, seed: u64) -> Result<Self> {
        if !(0.0..=MAX_LOSS).contains(&loss) {
            return Err(Error::InvalidArgument(format!(
                "loss {loss} outside the evaluated range [0, {MAX_LOSS}]"
            )));
        }
        Ok(Self::unbounded(kind, grid, loss, seed))
    }

    /// Skips the `MAX_LOSS` ceiling; used for degenerate checks like total replacement.
    pub fn unbounded(kind: AttackKind, grid: GridSpec, loss: f64, seed: u64) -> Self {
        Self {
            kind,
            grid,
            loss,
            fill: DropFill::default(),
            seed,
        }
    }

    pub fn with_fill(mut self, fill: DropFill) -> Self {
        self.fill = fill;
        self
    }

    fn grid_for(&self, img: &ImageTensor) -> Result<PatchGrid> {
        make_grid(img.height(), img.width(), self.grid.rows, self.grid.cols)
    }

    fn sample_mask(&self, img: &ImageTensor, rng: &mut SeededRng) -> Result<PatchMask> {
        if !(0.0..=1.0).contains(&self.loss) {
            return Err(Error::InvalidArgument(format!("loss {} outside [0, 1]", self.loss)));
        }
        sample_patch_mask(&self.grid_for(img)?, self.loss, rng)
    }
}

/// Replaces `round(loss * N)` patches of `x` by the co-located patches of `donor`.
pub fn patch_mix_attack(
    x: &ImageTensor,
    donor: &ImageTensor,
    spec: &AttackSpec,
    rng: &mut SeededRng,
) -> Result<(ImageTensor, PatchMask)> {
    x.ensure_same_shape(donor)?;
    let mask = spec.sample_mask(x, rng)?;
    let out = patch_mix(x, donor, &mask)?;
    Ok((out, mask))
}

/// Like [`patch_mix_attack`] but each replaced patch comes from a donor chosen
/// uniformly per patch. Returns the donor index for every set mask bit, in patch order.
pub fn patch_mix_attack_per_patch(
    x: &ImageTensor,
    donors: &[&ImageTensor],
    spec: &AttackSpec,
    rng: &mut SeededRng,
) -> Result<(ImageTensor, PatchMask, Vec<usize>)> {
    if donors.is_empty() {
        return Err(Error::InvalidArgument("no donor images".into()));
    }
    for d in donors {
        x.ensure_same_shape(d)?;
    }
    let mask = spec.sample_mask(x, rng)?;
    let grid = *mask.grid();
    let mut out = x.clone();
    let mut chosen = Vec::with_capacity(mask.popcount());
    for idx in mask.set_indices() {
        let d = rng.below(donors.len());
        chosen.push(d);
        let single = PatchMask::from_indices(grid, &[idx])?;
        out = patch_mix(&out, donors[d], &single)?;
    }
    Ok((out, mask, chosen))
}

/// Sets `round(loss * N)` patches to the fill value.
pub fn patch_drop(
    x: &ImageTensor,
    spec: &AttackSpec,
    rng: &mut SeededRng,
) -> Result<(ImageTensor, PatchMask)> {
    let fill = spec.fill.values(x.channels())?;
    let mask = spec.sample_mask(x, rng)?;
    let grid = mask.grid();
    let c = x.channels();
    let width = x.width();
    let mut out = x.clone();
    let data = out.data_mut();
    for idx in mask.set_indices() {
        let (y0, x0) = grid.patch_origin(idx);
        for y in y0..y0 + grid.patch_h() {
            for xx in x0..x0 + grid.patch_w() {
                let i = (y * width + xx) * c;
                data[i..i + c].copy_from_slice(&fill);
            }
        }
    }
    Ok((out, mask))
}

/// Rearranges patches by a uniformly random permutation.
///
/// Output patch `i` holds input patch `perm[i]`.
pub fn patch_permute(
    x: &ImageTensor,
    shuffle_grid: GridSpec,
    rng: &mut SeededRng,
) -> Result<(ImageTensor, Vec<usize>)> {
    let grid = shuffle_grid.for_image(x.height(), x.width())?;
    let mut perm: Vec<usize> = (0..grid.n_patches()).collect();
    rng.shuffle(&mut perm);
    let out = apply_permutation(x, &grid, &perm)?;
    Ok((out, perm))
}

/// Output patch `i` takes input patch `perm[i]`.
pub fn apply_permutation(x: &ImageTensor, grid: &PatchGrid, perm: &[usize]) -> Result<ImageTensor> {
    grid.check_image(x)?;
    check_permutation(perm, grid.n_patches())?;
    let c = x.channels();
    let row_len = grid.patch_w() * c;
    let mut out = x.clone();
    let src = x.data();
    let dst = out.data_mut();
    for (to, &from) in perm.iter().enumerate() {
        let (ty, tx) = grid.patch_origin(to);
        let (fy, fx) = grid.patch_origin(from);
        for dy in 0..grid.patch_h() {
            let t = ((ty + dy) * x.width() + tx) * c;
            let f = ((fy + dy) * x.width() + fx) * c;
            dst[t..t + row_len].copy_from_slice(&src[f..f + row_len]);
        }
    }
    Ok(out)
}

pub fn invert_permutation(perm: &[usize]) -> Result<Vec<usize>> {
    check_permutation(perm, perm.len())?;
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    Ok(inv)
}

/// Undoes [`patch_permute`].
pub fn unpermute(x: &ImageTensor, grid: &PatchGrid, perm: &[usize]) -> Result<ImageTensor> {
    apply_permutation(x, grid, &invert_permutation(perm)?)
}

fn check_permutation(perm: &[usize], n: usize) -> Result<()> {
    if perm.len() != n {
        return Err(Error::shape(format!("permutation of {n}"), perm.len()));
    }
    let mut seen = vec![false; n];
    for &p in perm {
        if p >= n || std::mem::replace(&mut seen[p], true) {
            return Err(Error::InvalidArgument(format!("{perm:?} is not a permutation")));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gradient(h: usize, w: usize) -> ImageTensor {
        ImageTensor::from_fn(h, w, 3, |y, x, c| ((y * w + x) * 3 + c) as f64 / (h * w * 3) as f64).unwrap()
    }

    #[test]
    fn mix_attack_extremes() {
        let x = ImageTensor::filled(224, 224, 3, 0.2).unwrap();
        let donor = ImageTensor::filled(224, 224, 3, 0.9).unwrap();
        let mut rng = SeededRng::new(1);
        let spec = AttackSpec::new(AttackKind::Mix, GridSpec::new(7, 7), 0.0, 1).unwrap();
        let (out, mask) = patch_mix_attack(&x, &donor, &spec, &mut rng).unwrap();
        assert_eq!(out, x);
        assert_eq!(mask.popcount(), 0);

        let spec = AttackSpec::unbounded(AttackKind::Mix, GridSpec::new(7, 7), 1.0, 1);
        let (out, _) = patch_mix_attack(&x, &donor, &spec, &mut rng).unwrap();
        assert_eq!(out, donor);
    }

    #[test]
    fn mix_attack_half_of_fine_grid() {
        let x = gradient(224, 224);
        let donor = ImageTensor::filled(224, 224, 3, 1.0).unwrap();
        let spec = AttackSpec::new(AttackKind::Mix, GridSpec::new(14, 14), 0.5, 3).unwrap();
        let (_, mask) = patch_mix_attack(&x, &donor, &spec, &mut SeededRng::new(3)).unwrap();
        assert_eq!(mask.popcount(), 98);
    }

    #[test]
    fn spec_rejects_losses_beyond_range() {
        assert!(AttackSpec::new(AttackKind::Drop, GridSpec::new(7, 7), 0.81, 0).is_err());
        assert!(AttackSpec::new(AttackKind::Drop, GridSpec::new(7, 7), -0.1, 0).is_err());
    }

    #[test]
    fn drop_examples() {
        let x = gradient(224, 224);
        let spec = AttackSpec::new(AttackKind::Drop, GridSpec::new(7, 7), 0.0, 0).unwrap();
        assert_eq!(patch_drop(&x, &spec, &mut SeededRng::new(0)).unwrap().0, x);

        let spec = AttackSpec::new(AttackKind::Drop, GridSpec::new(16, 16), 0.8, 0).unwrap();
        let (_, mask) = patch_drop(&x, &spec, &mut SeededRng::new(0)).unwrap();
        assert_eq!(mask.popcount(), 205);

        let ones = ImageTensor::filled(224, 224, 3, 1.0).unwrap();
        let spec = AttackSpec::new(AttackKind::Drop, GridSpec::new(7, 7), 2.0 / 49.0, 0).unwrap();
        let (out, mask) = patch_drop(&ones, &spec, &mut SeededRng::new(4)).unwrap();
        assert_eq!(mask.popcount(), 2);
        let before: f64 = ones.data().iter().sum();
        let after: f64 = out.data().iter().sum();
        // per channel: 2 patches of 32x32 pixels
        assert_eq!(before - after, (2 * 32 * 32 * 3) as f64);
    }

    #[test]
    fn drop_per_channel_fill() {
        let x = ImageTensor::filled(28, 28, 3, 1.0).unwrap();
        let spec = AttackSpec::unbounded(AttackKind::Drop, GridSpec::new(1, 1), 1.0, 0)
            .with_fill(DropFill::PerChannel(vec![0.485, 0.456, 0.406]));
        let (out, _) = patch_drop(&x, &spec, &mut SeededRng::new(0)).unwrap();
        assert_eq!(out.pixel(5, 5), &[0.485, 0.456, 0.406]);

        let bad = spec.clone().with_fill(DropFill::PerChannel(vec![0.5]));
        assert!(patch_drop(&x, &bad, &mut SeededRng::new(0)).is_err());
    }

    #[test]
    fn permute_identity_grid() {
        let x = gradient(224, 224);
        let (out, perm) = patch_permute(&x, GridSpec::new(1, 1), &mut SeededRng::new(0)).unwrap();
        assert_eq!(out, x);
        assert_eq!(perm, vec![0]);
    }

    #[test]
    fn permute_round_trip_2x2() {
        let x = gradient(224, 224);
        let (out, perm) = patch_permute(&x, GridSpec::new(2, 2), &mut SeededRng::new(7)).unwrap();
        let grid = GridSpec::new(2, 2).for_image(224, 224).unwrap();
        // each output block equals the input block it was taken from
        for (to, &from) in perm.iter().enumerate() {
            let (ty, tx) = grid.patch_origin(to);
            let (fy, fx) = grid.patch_origin(from);
            assert_eq!(out.pixel(ty + 13, tx + 101), x.pixel(fy + 13, fx + 101));
        }
        assert_eq!(unpermute(&out, &grid, &perm).unwrap(), x);
    }

    #[test]
    fn invalid_permutations_rejected() {
        assert!(invert_permutation(&[0, 0, 1]).is_err());
        assert!(invert_permutation(&[0, 3, 1]).is_err());
        assert_eq!(invert_permutation(&[2, 0, 1]).unwrap(), vec![1, 2, 0]);
    }

    #[test]
    fn per_patch_donors() {
        let x = ImageTensor::filled(28, 28, 1, 0.0).unwrap();
        let d1 = ImageTensor::filled(28, 28, 1, 0.5).unwrap();
        let d2 = ImageTensor::filled(28, 28, 1, 1.0).unwrap();
        let spec = AttackSpec::new(AttackKind::Mix, GridSpec::new(7, 7), 0.5, 0).unwrap();
        let (out, mask, chosen) =
            patch_mix_attack_per_patch(&x, &[&d1, &d2], &spec, &mut SeededRng::new(5)).unwrap();
        assert_eq!(chosen.len(), mask.popcount());
        let grid = mask.grid();
        for (idx, d) in mask.set_indices().zip(&chosen) {
            let (y, xx) = grid.patch_origin(idx);
            assert_eq!(out.get(y, xx, 0), [0.5, 1.0][*d]);
        }
    }

    #[test]
    fn kind_parsing() {
        assert_eq!("mix".parse::<AttackKind>().unwrap(), AttackKind::Mix);
        assert_eq!("patch_drop".parse::<AttackKind>().unwrap(), AttackKind::Drop);
        assert!("blur".parse::<AttackKind>().is_err());
    }
}
