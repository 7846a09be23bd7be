//! Exact finite-group algebra for the icosahedral rotation group.
//!
//! The group has 60 rotations. All composition is done through a precomputed
//! Cayley table, so downstream code never multiplies matrices to compose
//! group elements. Element order is canonical (lexicographic over rounded
//! matrix entries, identity first), which makes weight files and test
//! fixtures reproducible across builds.

use std::fmt;
use std::io::Write;
use std::sync::OnceLock;

use nalgebra::{Matrix3, Vector3};

use crate::error::{Error, Result};
use crate::so3;

pub const GROUP_ORDER: usize = 60;
pub const NEIGHBORHOOD_SIZE: usize = 13;

/// Angular tolerance for identifying two rotations as the same group element.
/// Distinct icosahedral rotations are at least 72 degrees apart, so anything
/// far below that is safe.
const MATCH_TOL: f64 = 1e-6;

/// One of the 60 rotations, identified by its canonical index.
/// Index 0 is the identity.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct GroupElement(pub u8);

impl GroupElement {
    pub const IDENTITY: GroupElement = GroupElement(0);

    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Debug for GroupElement {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "g{}", self.0)
    }
}

/// The icosahedral rotation group with its multiplication tables and the
/// 13-element convolution neighborhood.
pub struct IcosahedralGroup {
    rotations: Vec<Matrix3<f64>>,
    cayley: Vec<GroupElement>,  // row-major 60x60, cayley[a*60+b] = a·b
    inverse: Vec<GroupElement>, // 60
    neighborhood: Vec<GroupElement>, // 13, identity first
    conv_taps: Vec<GroupElement>, // row-major 60x13, conv_taps[g*13+i] = h_i·g
    max_closure_deviation: f64,
}

impl IcosahedralGroup {
    /// Builds the group from two generators of a canonically oriented regular
    /// icosahedron: a 72-degree rotation about a vertex axis and a 180-degree
    /// rotation about an edge-center axis. Deterministic; panics if closure
    /// does not produce exactly 60 elements (a generator/tolerance bug, never
    /// a data condition).
    pub fn build() -> Self {
        let phi = (1.0 + 5.0_f64.sqrt()) / 2.0;
        // Vertex (0, 1, phi) and the z-axis through the center of the edge
        // between (0, 1, phi) and (0, -1, phi).
        let gen_vertex = so3::axis_angle(
            &Vector3::new(0.0, 1.0, phi),
            2.0 * std::f64::consts::PI / 5.0,
        );
        let gen_edge = Matrix3::from_diagonal(&Vector3::new(-1.0, -1.0, 1.0));

        // Closure by worklist.
        let mut elements: Vec<Matrix3<f64>> = vec![Matrix3::identity()];
        let mut cursor = 0;
        while cursor < elements.len() {
            let base = elements[cursor];
            cursor += 1;
            for gen in [&gen_vertex, &gen_edge] {
                let candidate = gen * base;
                let is_new = elements
                    .iter()
                    .all(|e| so3::geodesic_angle(e, &candidate) > MATCH_TOL);
                if is_new {
                    elements.push(candidate);
                }
            }
            assert!(
                elements.len() <= GROUP_ORDER,
                "icosahedral closure produced more than {GROUP_ORDER} elements"
            );
        }
        assert_eq!(
            elements.len(),
            GROUP_ORDER,
            "icosahedral closure produced {} elements, expected {GROUP_ORDER}",
            elements.len()
        );

        // Squash generator round-off, then order canonically.
        for e in &mut elements {
            *e = so3::nearest_rotation(e);
        }
        elements.sort_by_key(|m| canonical_key(m));
        let identity_pos = elements
            .iter()
            .position(|e| so3::rotation_angle(e) <= MATCH_TOL)
            .expect("identity must be in the group");
        let identity = elements.remove(identity_pos);
        elements.insert(0, identity);

        // Multiplication and inverse tables by nearest-element matching.
        let mut cayley = vec![GroupElement(0); GROUP_ORDER * GROUP_ORDER];
        let mut max_closure_deviation = 0.0_f64;
        for a in 0..GROUP_ORDER {
            for b in 0..GROUP_ORDER {
                let product = elements[a] * elements[b];
                let (idx, angle) = nearest_element(&elements, &product);
                assert!(
                    angle <= MATCH_TOL,
                    "product of elements {a} and {b} matches no element \
                     (nearest is {angle} rad away)"
                );
                let dev = (product - elements[idx]).abs().max();
                max_closure_deviation = max_closure_deviation.max(dev);
                cayley[a * GROUP_ORDER + b] = GroupElement(idx as u8);
            }
        }
        let mut inverse = vec![GroupElement(0); GROUP_ORDER];
        for (a, rot) in elements.iter().enumerate() {
            let (idx, angle) = nearest_element(&elements, &rot.transpose());
            assert!(angle <= MATCH_TOL, "inverse of element {a} not found");
            inverse[a] = GroupElement(idx as u8);
        }

        // Neighborhood H: identity plus the 12 rotations by 72 degrees
        // (trace = 1 + 2 cos 72, the golden ratio).
        let target_trace = 1.0 + 2.0 * (2.0 * std::f64::consts::PI / 5.0).cos();
        let mut neighborhood = vec![GroupElement::IDENTITY];
        for (i, rot) in elements.iter().enumerate() {
            if (rot.trace() - target_trace).abs() < 1e-6 {
                neighborhood.push(GroupElement(i as u8));
            }
        }
        assert_eq!(
            neighborhood.len(),
            NEIGHBORHOOD_SIZE,
            "expected 12 rotations of 72 degrees"
        );

        let mut conv_taps = vec![GroupElement(0); GROUP_ORDER * NEIGHBORHOOD_SIZE];
        for g in 0..GROUP_ORDER {
            for (i, h) in neighborhood.iter().enumerate() {
                conv_taps[g * NEIGHBORHOOD_SIZE + i] = cayley[h.index() * GROUP_ORDER + g];
            }
        }

        IcosahedralGroup {
            rotations: elements,
            cayley,
            inverse,
            neighborhood,
            conv_taps,
            max_closure_deviation,
        }
    }

    pub fn rotation(&self, g: GroupElement) -> &Matrix3<f64> {
        &self.rotations[g.index()]
    }

    pub fn rotations(&self) -> &[Matrix3<f64>] {
        &self.rotations
    }

    /// Composition `a · b` (apply `b` first, then `a`).
    pub fn compose(&self, a: GroupElement, b: GroupElement) -> GroupElement {
        self.cayley[a.index() * GROUP_ORDER + b.index()]
    }

    pub fn inverse(&self, a: GroupElement) -> GroupElement {
        self.inverse[a.index()]
    }

    /// The convolution neighborhood H: identity plus the 12 rotations of 72
    /// degrees. `neighborhood()[0]` is the identity.
    pub fn neighborhood(&self) -> &[GroupElement] {
        &self.neighborhood
    }

    /// Precomputed `h_i · g` for every group element `g` and every tap
    /// `h_i` in the neighborhood; row-major 60x13.
    pub fn conv_tap(&self, g: GroupElement, tap: usize) -> GroupElement {
        self.conv_taps[g.index() * NEIGHBORHOOD_SIZE + tap]
    }

    /// Worst-case max-norm gap between a matrix product of two elements and
    /// the stored matrix of their composition. Diagnostic for tests.
    pub fn max_closure_deviation(&self) -> f64 {
        self.max_closure_deviation
    }

    pub fn elements(&self) -> impl Iterator<Item = GroupElement> {
        (0..GROUP_ORDER as u8).map(GroupElement)
    }

    /// Nearest group element to an arbitrary rotation, with the leftover
    /// geodesic angle. Ties break to the lowest index. Errors if `r` is not
    /// orthonormal within 1e-6.
    pub fn quantize_rotation(&self, r: &Matrix3<f64>) -> Result<(GroupElement, f64)> {
        if !so3::is_rotation(r, 1e-6) {
            return Err(Error::InvalidRotation(format!(
                "orthonormality error {:.2e}, det {:.6}",
                so3::orthonormality_error(r),
                r.determinant()
            )));
        }
        let mut best = (GroupElement(0), f64::INFINITY);
        for (i, rot) in self.rotations.iter().enumerate() {
            let angle = so3::geodesic_angle(r, rot);
            if angle < best.1 {
                best = (GroupElement(i as u8), angle);
            }
        }
        Ok(best)
    }

    /// Dumps rotation matrices, Cayley table, inverse table and neighborhood
    /// as structured text for cross-implementation diffing.
    pub fn write_tables<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "icosahedral-group-tables v1")?;
        writeln!(w, "order {GROUP_ORDER}")?;
        for (i, r) in self.rotations.iter().enumerate() {
            write!(w, "rotation {i}")?;
            for row in 0..3 {
                for col in 0..3 {
                    write!(w, " {:+.15}", r[(row, col)])?;
                }
            }
            writeln!(w)?;
        }
        for a in 0..GROUP_ORDER {
            write!(w, "cayley {a}")?;
            for b in 0..GROUP_ORDER {
                write!(w, " {}", self.cayley[a * GROUP_ORDER + b].0)?;
            }
            writeln!(w)?;
        }
        write!(w, "inverse")?;
        for a in 0..GROUP_ORDER {
            write!(w, " {}", self.inverse[a].0)?;
        }
        writeln!(w)?;
        write!(w, "neighborhood")?;
        for h in &self.neighborhood {
            write!(w, " {}", h.0)?;
        }
        writeln!(w)
    }
}

/// Shared instance; the group is immutable after construction.
pub fn icosahedral_group() -> &'static IcosahedralGroup {
    static GROUP: OnceLock<IcosahedralGroup> = OnceLock::new();
    GROUP.get_or_init(IcosahedralGroup::build)
}

/// Row-major matrix entries rounded to 12 decimals; total order on rotations.
fn canonical_key(m: &Matrix3<f64>) -> [i64; 9] {
    let mut key = [0_i64; 9];
    for row in 0..3 {
        for col in 0..3 {
            key[row * 3 + col] = (m[(row, col)] * 1e12).round() as i64;
        }
    }
    key
}

fn nearest_element(elements: &[Matrix3<f64>], m: &Matrix3<f64>) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (i, e) in elements.iter().enumerate() {
        let angle = so3::geodesic_angle(e, m);
        if angle < best.1 {
            best = (i, angle);
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    #[test]
    fn sixty_elements_identity_first() {
        let g = icosahedral_group();
        assert_eq!(g.rotations().len(), 60);
        assert!(so3::rotation_angle(g.rotation(GroupElement::IDENTITY)) < 1e-12);
    }

    #[test]
    fn rotations_are_orthonormal() {
        let g = icosahedral_group();
        for r in g.rotations() {
            assert!(so3::orthonormality_error(r) <= 1e-12);
            assert!((r.determinant() - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn cayley_identity_and_inverse_laws() {
        let g = icosahedral_group();
        let e = GroupElement::IDENTITY;
        for a in g.elements() {
            assert_eq!(g.compose(e, a), a);
            assert_eq!(g.compose(a, e), a);
            assert_eq!(g.compose(a, g.inverse(a)), e);
            assert_eq!(g.compose(g.inverse(a), a), e);
            assert_eq!(g.inverse(g.inverse(a)), a);
        }
    }

    #[test]
    fn cayley_matches_matrix_products() {
        // Brute force over all 3600 pairs.
        let g = icosahedral_group();
        for a in g.elements() {
            for b in g.elements() {
                let product = g.rotation(a) * g.rotation(b);
                let stored = g.rotation(g.compose(a, b));
                assert!((product - stored).abs().max() <= 1e-9);
            }
        }
    }

    #[test]
    fn associativity_sampled_against_matrix_products() {
        let g = icosahedral_group();
        let mut rng = ChaCha20Rng::seed_from_u64(11);
        for _ in 0..1000 {
            let a = GroupElement(rng.random_range(0..60));
            let b = GroupElement(rng.random_range(0..60));
            let c = GroupElement(rng.random_range(0..60));
            let left = g.compose(g.compose(a, b), c);
            let right = g.compose(a, g.compose(b, c));
            assert_eq!(left, right);
            let matrix = g.rotation(a) * g.rotation(b) * g.rotation(c);
            assert!(so3::geodesic_angle(&matrix, g.rotation(left)) < 1e-9);
        }
    }

    #[test]
    fn neighborhood_all_72_degree_rotations() {
        let g = icosahedral_group();
        let h = g.neighborhood();
        assert_eq!(h.len(), 13);
        assert_eq!(h[0], GroupElement::IDENTITY);
        let angle_72 = 2.0 * std::f64::consts::PI / 5.0;
        for &m in &h[1..] {
            assert!((so3::rotation_angle(g.rotation(m)) - angle_72).abs() <= 1e-9);
        }
    }

    #[test]
    fn quantize_identity_and_members() {
        let g = icosahedral_group();
        let (e, angle) = g.quantize_rotation(&Matrix3::identity()).unwrap();
        assert_eq!(e, GroupElement::IDENTITY);
        assert!(angle < 1e-12);
        for a in g.elements() {
            let (q, angle) = g.quantize_rotation(g.rotation(a)).unwrap();
            assert_eq!(q, a);
            assert!(angle < 1e-12);
        }
    }

    #[test]
    fn quantize_rejects_non_rotation() {
        let g = icosahedral_group();
        let m = Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, 2.0));
        assert!(g.quantize_rotation(&m).is_err());
        let reflection = Matrix3::from_diagonal(&Vector3::new(-1.0, 1.0, 1.0));
        assert!(g.quantize_rotation(&reflection).is_err());
    }

    #[test]
    fn build_is_deterministic() {
        let a = IcosahedralGroup::build();
        let b = IcosahedralGroup::build();
        for (ra, rb) in a.rotations().iter().zip(b.rotations()) {
            assert_eq!(ra, rb); // bit-identical
        }
        assert_eq!(a.cayley, b.cayley);
        assert_eq!(a.inverse, b.inverse);
        assert_eq!(a.neighborhood, b.neighborhood);
    }

    #[test]
    fn closure_deviation_small() {
        assert!(icosahedral_group().max_closure_deviation() <= 1e-12);
    }

    #[test]
    fn tables_dump_contains_all_sections() {
        let mut buf = Vec::new();
        icosahedral_group().write_tables(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("icosahedral-group-tables v1"));
        assert_eq!(text.lines().filter(|l| l.starts_with("rotation ")).count(), 60);
        assert_eq!(text.lines().filter(|l| l.starts_with("cayley ")).count(), 60);
        assert!(text.lines().any(|l| l.starts_with("neighborhood ")));
    }
}
