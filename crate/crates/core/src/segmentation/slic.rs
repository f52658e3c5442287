//! Simple Linear Iterative Clustering restricted to an arbitrary pixel region
//! of a grayscale raster. Used to split large foreground components.

const MAX_ITERATIONS: usize = 10;
/// Gray intensities are scaled to the 0..100 range of a CIELAB lightness
/// channel so that the usual compactness values (around 10) keep their meaning.
const INTENSITY_SCALE: f64 = 100.0;

#[derive(Debug, Clone, Copy)]
struct Center {
    x: f64,
    y: f64,
    l: f64,
}

/// Clusters the pixels listed in `region` (row-major indices into a
/// `width`-wide raster) into roughly `n_segments` compact superpixels.
///
/// Returns one cluster id per entry of `region`, compacted to `0..k`. Every
/// returned cluster is 4-connected. Output is fully deterministic.
pub fn slic_region(
    gray: &[f32],
    width: usize,
    region: &[usize],
    n_segments: usize,
    compactness: f64,
) -> Vec<u32> {
    if region.is_empty() {
        return Vec::new();
    }
    let height = gray.len() / width;
    let n_segments = n_segments.max(1);

    // Local index of each region pixel within `region`, or usize::MAX.
    let mut local = vec![usize::MAX; width * height];
    for (k, &p) in region.iter().enumerate() {
        local[p] = k;
    }

    let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0, 0);
    for &p in region {
        let (x, y) = (p % width, p / width);
        x0 = x0.min(x);
        y0 = y0.min(y);
        x1 = x1.max(x);
        y1 = y1.max(y);
    }

    let step = (region.len() as f64 / n_segments as f64).sqrt().max(1.0);
    let mut centers = Vec::new();
    let mut gy = 0usize;
    loop {
        let cy = y0 as f64 + step * (gy as f64 + 0.5);
        if cy > y1 as f64 + 0.5 {
            break;
        }
        let mut gx = 0usize;
        loop {
            let cx = x0 as f64 + step * (gx as f64 + 0.5);
            if cx > x1 as f64 + 0.5 {
                break;
            }
            let (px, py) = (cx.floor() as usize, cy.floor() as usize);
            if px < width && py < height {
                let p = py * width + px;
                if local[p] != usize::MAX {
                    centers.push(Center {
                        x: px as f64,
                        y: py as f64,
                        l: gray[p] as f64 * INTENSITY_SCALE,
                    });
                }
            }
            gx += 1;
        }
        gy += 1;
    }
    if centers.len() <= 1 {
        return vec![0; region.len()];
    }

    let spatial_weight = (compactness / step).powi(2);
    let radius = (2.0 * step).ceil() as i64;
    let mut assignment = vec![u32::MAX; region.len()];
    let mut distance = vec![f64::INFINITY; region.len()];

    for _ in 0..MAX_ITERATIONS {
        distance.fill(f64::INFINITY);
        for (c, center) in centers.iter().enumerate() {
            let (cx, cy) = (center.x.round() as i64, center.y.round() as i64);
            let ylo = (cy - radius).max(0);
            let yhi = (cy + radius).min(height as i64 - 1);
            let xlo = (cx - radius).max(0);
            let xhi = (cx + radius).min(width as i64 - 1);
            for y in ylo..=yhi {
                for x in xlo..=xhi {
                    let p = y as usize * width + x as usize;
                    let k = local[p];
                    if k == usize::MAX {
                        continue;
                    }
                    let dl = gray[p] as f64 * INTENSITY_SCALE - center.l;
                    let (dx, dy) = (x as f64 - center.x, y as f64 - center.y);
                    let d = dl * dl + (dx * dx + dy * dy) * spatial_weight;
                    if d < distance[k] {
                        distance[k] = d;
                        assignment[k] = c as u32;
                    }
                }
            }
        }
        // Pixels outside every search window fall back to the nearest center.
        for (k, &p) in region.iter().enumerate() {
            if distance[k].is_finite() {
                continue;
            }
            let (x, y) = ((p % width) as f64, (p / width) as f64);
            let l = gray[p] as f64 * INTENSITY_SCALE;
            let mut best = (f64::INFINITY, 0u32);
            for (c, center) in centers.iter().enumerate() {
                let d = (l - center.l).powi(2)
                    + ((x - center.x).powi(2) + (y - center.y).powi(2)) * spatial_weight;
                if d < best.0 {
                    best = (d, c as u32);
                }
            }
            assignment[k] = best.1;
            distance[k] = best.0;
        }

        let mut sums = vec![(0.0f64, 0.0f64, 0.0f64, 0usize); centers.len()];
        for (k, &p) in region.iter().enumerate() {
            let s = &mut sums[assignment[k] as usize];
            s.0 += (p % width) as f64;
            s.1 += (p / width) as f64;
            s.2 += gray[p] as f64 * INTENSITY_SCALE;
            s.3 += 1;
        }
        for (center, s) in centers.iter_mut().zip(&sums) {
            if s.3 > 0 {
                let n = s.3 as f64;
                *center = Center {
                    x: s.0 / n,
                    y: s.1 / n,
                    l: s.2 / n,
                };
            }
        }
    }

    enforce_connectivity(width, height, region, &local, &assignment, step)
}

/// Relabels each 4-connected piece of every cluster; pieces smaller than a
/// quarter of the nominal superpixel area are absorbed by an adjacent,
/// already-finalized piece.
fn enforce_connectivity(
    width: usize,
    height: usize,
    region: &[usize],
    local: &[usize],
    assignment: &[u32],
    step: f64,
) -> Vec<u32> {
    let min_size = ((step * step) / 4.0).floor() as usize;
    let mut out = vec![u32::MAX; region.len()];
    let mut next = 0u32;
    let mut piece = Vec::new();
    let mut stack = Vec::new();

    for start in 0..region.len() {
        if out[start] != u32::MAX {
            continue;
        }
        let cluster = assignment[start];
        piece.clear();
        stack.push(start);
        out[start] = next;
        let mut adjacent = None;
        while let Some(k) = stack.pop() {
            piece.push(k);
            let p = region[k];
            let (x, y) = (p % width, p / width);
            let neighbours = [
                (x > 0).then(|| p - 1),
                (x + 1 < width).then(|| p + 1),
                (y > 0).then(|| p - width),
                (y + 1 < height).then(|| p + width),
            ];
            for q in neighbours.into_iter().flatten() {
                let kq = local[q];
                if kq == usize::MAX {
                    continue;
                }
                if assignment[kq] == cluster && out[kq] == u32::MAX {
                    out[kq] = next;
                    stack.push(kq);
                } else if out[kq] != u32::MAX && out[kq] != next && adjacent.is_none() {
                    adjacent = Some(out[kq]);
                }
            }
        }
        match adjacent {
            Some(adj) if piece.len() < min_size => {
                for &k in &piece {
                    out[k] = adj;
                }
            }
            _ => next += 1,
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn connected(width: usize, region: &[usize], ids: &[u32], id: u32) -> bool {
        let members: Vec<usize> = region
            .iter()
            .zip(ids)
            .filter(|(_, &i)| i == id)
            .map(|(&p, _)| p)
            .collect();
        let set: std::collections::HashSet<usize> = members.iter().copied().collect();
        let mut seen = std::collections::HashSet::new();
        let mut stack = vec![members[0]];
        seen.insert(members[0]);
        while let Some(p) = stack.pop() {
            let (x, y) = (p % width, p / width);
            let mut nbrs = vec![p + 1, p + width];
            if x > 0 {
                nbrs.push(p - 1);
            }
            if y > 0 {
                nbrs.push(p - width);
            }
            for q in nbrs {
                if set.contains(&q) && seen.insert(q) {
                    stack.push(q);
                }
            }
        }
        seen.len() == members.len()
    }

    #[test]
    fn uniform_block_splits_into_compact_connected_cells() {
        let (w, h) = (100, 60);
        let gray = vec![0.0f32; w * h];
        let region: Vec<usize> = (0..w * h).filter(|p| (p / w) >= 10 && (p / w) < 40).collect();
        let ids = slic_region(&gray, w, &region, 30, 10.0);
        let k = *ids.iter().max().unwrap() + 1;
        assert!((20..=40).contains(&k), "got {k} clusters");
        for id in 0..k {
            assert!(connected(w, &region, &ids, id));
        }
        assert_eq!(ids, slic_region(&gray, w, &region, 30, 10.0));
    }

    #[test]
    fn single_segment_request_keeps_region_whole() {
        let gray = vec![0.5f32; 16];
        let region: Vec<usize> = (0..16).collect();
        assert_eq!(slic_region(&gray, 4, &region, 1, 10.0), vec![0; 16]);
    }

    #[test]
    fn intensity_edge_is_respected() {
        // Left half dark, right half light, low compactness: no cluster should
        // straddle the edge.
        let (w, h) = (40, 20);
        let gray: Vec<f32> = (0..w * h).map(|p| if p % w < 20 { 0.0 } else { 1.0 }).collect();
        let region: Vec<usize> = (0..w * h).collect();
        let ids = slic_region(&gray, w, &region, 8, 1.0);
        let k = *ids.iter().max().unwrap() + 1;
        for id in 0..k {
            let sides: std::collections::HashSet<bool> = region
                .iter()
                .zip(&ids)
                .filter(|(_, &i)| i == id)
                .map(|(&p, _)| p % w < 20)
                .collect();
            assert_eq!(sides.len(), 1);
        }
    }
}
