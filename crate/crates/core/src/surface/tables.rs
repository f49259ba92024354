//! The 256-case marching-cubes table, generated once at startup.
//!
//! Corner numbering (bit i of the case index set when corner i is inside,
//! i.e. value < iso):
//!
//! ```text
//!        7--------6          z
//!       /|       /|          |  y
//!      4--------5 |          | /
//!      | 3------|-2          |/
//!      |/       |/           +----x
//!      0--------1
//! ```
//!
//! Edges 0..11 connect (0,1),(1,2),(2,3),(3,0),(4,5),(5,6),(6,7),(7,4),
//! (0,4),(1,5),(2,6),(3,7).
//!
//! Each case's triangles are derived by tracing the isocontour on the six
//! faces: on every face, each crossing where the counterclockwise boundary
//! walk (seen from outside) enters the inside region is paired with the
//! following exit, giving directed segments with the inside on the left.
//! Saddle faces therefore always separate the two inside corners, and the
//! pairing depends only on the face's own signs, so adjacent cubes agree on
//! their shared face and the mesh is crack-free. Segments chain into closed
//! loops that are fan-triangulated, winding outward (toward positive SDF).

use std::sync::OnceLock;

pub const EDGE_CORNERS: [(usize, usize); 12] = [
    (0, 1),
    (1, 2),
    (2, 3),
    (3, 0),
    (4, 5),
    (5, 6),
    (6, 7),
    (7, 4),
    (0, 4),
    (1, 5),
    (2, 6),
    (3, 7),
];

/// Corner coordinates within the unit cell.
pub const CORNER_OFFSETS: [(usize, usize, usize); 8] = [
    (0, 0, 0),
    (1, 0, 0),
    (1, 1, 0),
    (0, 1, 0),
    (0, 0, 1),
    (1, 0, 1),
    (1, 1, 1),
    (0, 1, 1),
];

/// Faces as corner cycles, counterclockwise seen from outside the cube.
const FACES: [[usize; 4]; 6] = [
    [0, 3, 2, 1], // z = 0
    [4, 5, 6, 7], // z = 1
    [0, 1, 5, 4], // y = 0
    [3, 7, 6, 2], // y = 1
    [0, 4, 7, 3], // x = 0
    [1, 2, 6, 5], // x = 1
];

fn edge_between(a: usize, b: usize) -> usize {
    EDGE_CORNERS
        .iter()
        .position(|&(x, y)| (x, y) == (a, b) || (x, y) == (b, a))
        .expect("face edges are cube edges")
}

/// Triangles (as edge-id triples) for one sign configuration.
fn triangulate_case(case: u8) -> Vec<[u8; 3]> {
    let inside = |c: usize| (case >> c) & 1 == 1;
    // directed segments: (from edge, to edge), inside on the left seen from
    // outside the cube
    let mut segments: Vec<(u8, u8)> = Vec::new();
    for face in FACES {
        // crossings in walk order: (edge id, walk enters inside?)
        let mut crossings: Vec<(u8, bool)> = Vec::new();
        for k in 0..4 {
            let (a, b) = (face[k], face[(k + 1) % 4]);
            if inside(a) != inside(b) {
                crossings.push((edge_between(a, b) as u8, inside(b)));
            }
        }
        let n = crossings.len();
        for i in 0..n {
            let (entry_edge, is_entry) = crossings[i];
            if !is_entry {
                continue;
            }
            // the next crossing along the walk must be the matching exit
            let (exit_edge, is_exit_entry) = crossings[(i + 1) % n];
            debug_assert!(!is_exit_entry);
            segments.push((exit_edge, entry_edge));
        }
    }
    // chain segments into loops and fan-triangulate
    let mut triangles = Vec::new();
    let mut used = vec![false; segments.len()];
    for start in 0..segments.len() {
        if used[start] {
            continue;
        }
        used[start] = true;
        let mut ring = vec![segments[start].0, segments[start].1];
        loop {
            let tail = *ring.last().expect("nonempty ring");
            if tail == ring[0] {
                ring.pop();
                break;
            }
            let next = segments
                .iter()
                .enumerate()
                .find(|(i, s)| !used[*i] && s.0 == tail)
                .map(|(i, s)| (i, s.1))
                .expect("every crossing continues: segments pair up");
            used[next.0] = true;
            ring.push(next.1);
        }
        for i in 1..ring.len() - 1 {
            // reversed fan: right-hand normals point toward positive SDF
            triangles.push([ring[0], ring[i + 1], ring[i]]);
        }
    }
    triangles
}

pub fn triangle_table() -> &'static [Vec<[u8; 3]>; 256] {
    static TABLE: OnceLock<Box<[Vec<[u8; 3]>; 256]>> = OnceLock::new();
    TABLE.get_or_init(|| {
        let mut t: Vec<Vec<[u8; 3]>> = Vec::with_capacity(256);
        for case in 0..256u16 {
            t.push(triangulate_case(case as u8));
        }
        t.into_boxed_slice().try_into().expect("256 cases")
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_and_full_cases_are_empty() {
        let t = triangle_table();
        assert!(t[0].is_empty());
        assert!(t[255].is_empty());
    }

    #[test]
    fn single_corner_cases_are_one_triangle() {
        let t = triangle_table();
        for c in 0..8 {
            assert_eq!(t[1usize << c].len(), 1, "corner {c}");
            // complement: seven corners inside → also one triangle
            assert_eq!(t[255 ^ (1usize << c)].len(), 1);
        }
    }

    #[test]
    fn every_case_uses_each_crossing_edge_once_per_winding() {
        // in any case, each crossing edge is hit by exactly one loop vertex;
        // total triangle count stays within the classic bound of 5
        let t = triangle_table();
        for case in 0..256usize {
            assert!(t[case].len() <= 5, "case {case} has {} triangles", t[case].len());
            for tri in &t[case] {
                for &e in tri {
                    let (a, b) = EDGE_CORNERS[e as usize];
                    let ia = (case >> a) & 1;
                    let ib = (case >> b) & 1;
                    assert_ne!(ia, ib, "case {case}: edge {e} is not a crossing");
                }
            }
        }
    }

    #[test]
    fn complementary_cases_have_equal_triangle_budget() {
        let t = triangle_table();
        for case in 0..128usize {
            // complement flips orientation but cuts the same crossings
            let edges = |c: usize| {
                let mut e: Vec<u8> = t[c].iter().flatten().copied().collect();
                e.sort_unstable();
                e.dedup();
                e
            };
            assert_eq!(edges(case), edges(255 - case), "case {case}");
        }
    }
}
