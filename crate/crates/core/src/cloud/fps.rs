use super::{dist2, PointCloud};
use crate::error::{Error, Result};

/// Greedy farthest-point sampling. Starts at `start_index`, then repeatedly
/// takes the unselected point farthest from the selected set; ties go to the
/// lowest index. Returns `m` unique indices in selection order.
pub fn fps(cloud: &PointCloud, m: usize, start_index: usize) -> Result<Vec<usize>> {
    let pts = cloud.points();
    let n = pts.len();
    if m == 0 || m > n {
        return Err(Error::InvalidArgument(format!("fps needs 1 <= m <= {n}, got {m}")));
    }
    if start_index >= n {
        return Err(Error::InvalidArgument(format!("start index {start_index} out of range")));
    }
    let mut selected = vec![false; n];
    let mut nearest = vec![f64::INFINITY; n];
    let mut out = Vec::with_capacity(m);
    let mut cur = start_index;
    loop {
        selected[cur] = true;
        out.push(cur);
        if out.len() == m {
            return Ok(out);
        }
        let c = pts[cur];
        let mut best = usize::MAX;
        let mut best_d = f64::NEG_INFINITY;
        for i in 0..n {
            if selected[i] {
                continue;
            }
            let d = dist2(&pts[i], &c);
            if d < nearest[i] {
                nearest[i] = d;
            }
            if nearest[i] > best_d {
                best_d = nearest[i];
                best = i;
            }
        }
        cur = best;
    }
}
