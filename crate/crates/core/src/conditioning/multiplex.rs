//! Three-channel grouping of multiplex marker stacks.

use mupad_tensor::Tensor;

use crate::error::{MupadError, Result};

pub const GROUP_SIZE: usize = 3;

pub fn group_count(k: usize) -> usize {
    k.div_ceil(GROUP_SIZE)
}

/// Source channel for each slot of group `g` given `k` channels.
pub fn group_indices(g: usize, k: usize) -> [usize; GROUP_SIZE] {
    let last = k - 1;
    [0, 1, 2].map(|i| (g * GROUP_SIZE + i).min(last))
}

/// `[K, H, W]` to consecutive `[3, H, W]` triples; the last group repeats its final channel.
pub fn group_channels(mif: &Tensor) -> Result<Vec<Tensor>> {
    let s = mif.shape();
    if s.len() != 3 || s[0] == 0 {
        return Err(MupadError::Invalid(format!("expected [K>=1, H, W], got {s:?}")));
    }
    let (k, plane) = (s[0], s[1] * s[2]);
    (0..group_count(k))
        .map(|g| {
            let mut data = Vec::with_capacity(GROUP_SIZE * plane);
            for c in group_indices(g, k) {
                data.extend_from_slice(&mif.data()[c * plane..(c + 1) * plane]);
            }
            Ok(Tensor::new(&[GROUP_SIZE, s[1], s[2]], data)?)
        })
        .collect()
}

/// Reassembles `k` channels from groups; padding slots are ignored.
pub fn ungroup_channels(groups: &[Tensor], k: usize) -> Result<Tensor> {
    if groups.len() != group_count(k) || k == 0 {
        return Err(MupadError::Invalid(format!(
            "{} groups cannot hold {k} channels",
            groups.len()
        )));
    }
    let s = groups[0].shape().to_vec();
    if s.len() != 3 || s[0] != GROUP_SIZE || groups.iter().any(|g| g.shape() != s.as_slice()) {
        return Err(MupadError::Invalid(format!("group shape {s:?} is not [3, H, W]")));
    }
    let plane = s[1] * s[2];
    let mut data = Vec::with_capacity(k * plane);
    for c in 0..k {
        let (g, slot) = (c / GROUP_SIZE, c % GROUP_SIZE);
        data.extend_from_slice(&groups[g].data()[slot * plane..(slot + 1) * plane]);
    }
    Ok(Tensor::new(&[k, s[1], s[2]], data)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn stack(k: usize) -> Tensor {
        // channel c is filled with the value c
        Tensor::new(&[k, 2, 2], (0..k).flat_map(|c| [c as f64; 4]).collect()).unwrap()
    }

    fn firsts(g: &Tensor) -> Vec<f64> {
        (0..3).map(|i| g.data()[i * 4]).collect()
    }

    #[test]
    fn three_channels_is_one_identity_group() {
        let g = group_channels(&stack(3)).unwrap();
        assert_eq!(g, vec![stack(3)]);
    }

    #[test]
    fn four_channels_pad_last() {
        let g = group_channels(&stack(4)).unwrap();
        assert_eq!(g.len(), 2);
        assert_eq!(firsts(&g[0]), vec![0.0, 1.0, 2.0]);
        assert_eq!(firsts(&g[1]), vec![3.0, 3.0, 3.0]);
    }

    #[test]
    fn sixteen_markers() {
        let g = group_channels(&stack(16)).unwrap();
        assert_eq!(g.len(), 6);
        assert_eq!(firsts(&g[5]), vec![15.0, 15.0, 15.0]);
    }

    #[test]
    fn ungroup_inverts() {
        for k in 1..10 {
            let x = stack(k);
            assert_eq!(ungroup_channels(&group_channels(&x).unwrap(), k).unwrap(), x);
        }
    }
}
