//! Binary-mask helpers: 8-connected component labelling.

use std::collections::VecDeque;

/// 8-connected components of `mask` (`h×w`, row-major). Components are
/// listed in raster order of their first pixel; pixels within a component
/// are sorted ascending.
pub fn components8(mask: &[bool], h: usize, w: usize) -> Vec<Vec<usize>> {
    assert_eq!(mask.len(), h * w, "mask size");
    let mut seen = vec![false; mask.len()];
    let mut out = Vec::new();
    let mut queue = VecDeque::new();
    for start in 0..mask.len() {
        if !mask[start] || seen[start] {
            continue;
        }
        seen[start] = true;
        queue.push_back(start);
        let mut comp = Vec::new();
        while let Some(p) = queue.pop_front() {
            comp.push(p);
            for q in neighbors8(p, h, w) {
                if mask[q] && !seen[q] {
                    seen[q] = true;
                    queue.push_back(q);
                }
            }
        }
        comp.sort_unstable();
        out.push(comp);
    }
    out
}

/// In-bounds 8-neighbours of pixel index `p`.
pub fn neighbors8(p: usize, h: usize, w: usize) -> impl Iterator<Item = usize> {
    let (r, c) = ((p / w) as isize, (p % w) as isize);
    (-1isize..=1)
        .flat_map(move |dr| (-1isize..=1).map(move |dc| (dr, dc)))
        .filter(|&d| d != (0, 0))
        .filter_map(move |(dr, dc)| {
            let (rr, cc) = (r + dr, c + dc);
            (rr >= 0 && cc >= 0 && rr < h as isize && cc < w as isize).then(|| rr as usize * w + cc as usize)
        })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(rows: &[&str]) -> (Vec<bool>, usize, usize) {
        let w = rows[0].len();
        let m = rows.iter().flat_map(|r| r.chars().map(|ch| ch == '#')).collect();
        (m, rows.len(), w)
    }

    #[test]
    fn diagonal_touch_is_connected() {
        let (m, h, w) = parse(&["#..", ".#.", "..#"]);
        assert_eq!(components8(&m, h, w), vec![vec![0, 4, 8]]);
    }

    #[test]
    fn separate_blobs_in_raster_order() {
        let (m, h, w) = parse(&["..##", "....", "#..#"]);
        let comps = components8(&m, h, w);
        assert_eq!(comps, vec![vec![2, 3], vec![8], vec![11]]);
    }

    #[test]
    fn empty_mask() {
        assert!(components8(&[false; 6], 2, 3).is_empty());
    }

    #[test]
    fn corner_neighbors() {
        let mut n: Vec<_> = neighbors8(0, 3, 3).collect();
        n.sort();
        assert_eq!(n, vec![1, 3, 4]);
        assert_eq!(neighbors8(4, 3, 3).count(), 8);
    }
}
