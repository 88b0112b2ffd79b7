//! Moore-neighbor tracing of an instance's outer boundary.

use crate::postprocess::InstanceMask;

/// Closed outer boundary as pixel centers; the closing step from the last
/// point back to the first is implicit.
#[derive(Debug, Clone, PartialEq)]
pub struct Contour {
    pub points: Vec<(i64, i64)>,
}

impl Contour {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn as_f64(&self) -> Vec<[f64; 2]> {
        self.points
            .iter()
            .map(|&(x, y)| [x as f64, y as f64])
            .collect()
    }
}

// Clockwise on screen (y grows downward), starting west.
const RING: [(i64, i64); 8] = [
    (-1, 0),
    (-1, -1),
    (0, -1),
    (1, -1),
    (1, 0),
    (1, 1),
    (0, 1),
    (-1, 1),
];

fn ring_index(dx: i64, dy: i64) -> usize {
    RING.iter()
        .position(|&d| d == (dx, dy))
        .expect("offset is a king move")
}

/// Trace the outer boundary clockwise, starting from the leftmost pixel
/// (topmost among ties). Assumes the instance is 8-connected.
pub fn trace_contour(instance: &InstanceMask) -> Contour {
    let raster = instance.raster(1);
    let start = instance
        .pixels
        .iter()
        .map(|&(x, y)| (x as i64, y as i64))
        .min()
        .expect("instance is non-empty");

    let mut points = vec![start];
    let mut current = start;
    // West of the leftmost pixel is always background.
    let mut backtrack = ring_index(-1, 0);
    let mut second: Option<(i64, i64)> = None;
    // Each boundary pixel is entered at most 4 times on a closed walk.
    let limit = 4 * instance.pixels.len() + 8;

    loop {
        let mut next = None;
        for step in 1..=8 {
            let dir = (backtrack + step) % 8;
            let cand = (current.0 + RING[dir].0, current.1 + RING[dir].1);
            if raster.get(cand.0, cand.1) {
                next = Some((dir, cand));
                break;
            }
        }
        let Some((dir, cand)) = next else {
            // isolated pixel
            return Contour { points };
        };
        match second {
            None => second = Some(cand),
            Some(s) if current == start && cand == s => {
                points.pop();
                return Contour { points };
            }
            Some(_) => {}
        }
        // The ring position checked just before `cand` is background; it
        // becomes the backtrack pixel seen from `cand`.
        let prev = RING[(dir + 7) % 8];
        let bt = (current.0 + prev.0 - cand.0, current.1 + prev.1 - cand.1);
        backtrack = ring_index(bt.0, bt.1);
        current = cand;
        points.push(current);
        assert!(points.len() <= limit, "contour trace failed to close");
    }
}
