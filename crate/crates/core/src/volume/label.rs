//! 6-connected component labeling of 3D boolean grids.

use std::collections::VecDeque;

/// Component labels (0 = background, 1.. = components in scan order) and
/// the voxel count of each component (`sizes[k]` belongs to label `k + 1`).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Components {
    pub labels: Vec<u32>,
    pub sizes: Vec<usize>,
}

/// Labels `mask` on an x-fastest grid of extent `dims` with face
/// connectivity.
pub fn label_components(mask: &[bool], dims: [usize; 3]) -> Components {
    let [nx, ny, nz] = dims;
    assert_eq!(mask.len(), nx * ny * nz, "mask size");
    let mut labels = vec![0u32; mask.len()];
    let mut sizes = Vec::new();
    let mut queue = VecDeque::new();
    for start in 0..mask.len() {
        if !mask[start] || labels[start] != 0 {
            continue;
        }
        let label = sizes.len() as u32 + 1;
        labels[start] = label;
        queue.push_back(start);
        let mut size = 0;
        while let Some(i) = queue.pop_front() {
            size += 1;
            let x = i % nx;
            let y = (i / nx) % ny;
            let z = i / (nx * ny);
            let mut visit = |j: usize| {
                if mask[j] && labels[j] == 0 {
                    labels[j] = label;
                    queue.push_back(j);
                }
            };
            if x > 0 {
                visit(i - 1);
            }
            if x + 1 < nx {
                visit(i + 1);
            }
            if y > 0 {
                visit(i - nx);
            }
            if y + 1 < ny {
                visit(i + nx);
            }
            if z > 0 {
                visit(i - nx * ny);
            }
            if z + 1 < nz {
                visit(i + nx * ny);
            }
        }
        sizes.push(size);
    }
    Components { labels, sizes }
}

/// Mask of the largest component; ties go to the component found first in
/// scan order. `None` when the input has no foreground.
pub fn largest_component(mask: &[bool], dims: [usize; 3]) -> Option<Vec<bool>> {
    let comps = label_components(mask, dims);
    let (best, _) = comps
        .sizes
        .iter()
        .enumerate()
        .fold(None, |acc: Option<(usize, usize)>, (k, &s)| match acc {
            Some((_, bs)) if bs >= s => acc,
            _ => Some((k, s)),
        })?;
    let want = best as u32 + 1;
    Some(comps.labels.iter().map(|&l| l == want).collect())
}
