//! Landmark ordering schemes: point counts, left/right symmetry, and the
//! outer eye-corner indices used as the GTE normalizer.

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Scheme {
    pub id: &'static str,
    pub n_points: usize,
    /// Mirror partner of each index; midline points map to themselves.
    pub flip: Vec<usize>,
    pub left_eye_outer: usize,
    pub right_eye_outer: usize,
    pub nose_tip: usize,
}

impl Scheme {
    pub fn midline(&self) -> Vec<usize> {
        (0..self.n_points).filter(|&i| self.flip[i] == i).collect()
    }
}

pub const FACE12: &str = "face12";
pub const FACE66: &str = "face66";
pub const FACE68: &str = "face68";

pub fn registered() -> [&'static str; 3] {
    [FACE12, FACE66, FACE68]
}

fn from_pairs(n: usize, pairs: &[(usize, usize)]) -> Vec<usize> {
    let mut perm: Vec<usize> = (0..n).collect();
    for &(a, b) in pairs {
        perm[a] = b;
        perm[b] = a;
    }
    perm
}

/// 68-point iBUG pairs. 0-16 jaw, 17-26 brows, 27-35 nose, 36-47 eyes,
/// 48-67 mouth.
const PAIRS68: [(usize, usize); 29] = [
    (0, 16), (1, 15), (2, 14), (3, 13), (4, 12), (5, 11), (6, 10), (7, 9),
    (17, 26), (18, 25), (19, 24), (20, 23), (21, 22),
    (31, 35), (32, 34),
    (36, 45), (37, 44), (38, 43), (39, 42), (40, 47), (41, 46),
    (48, 54), (49, 53), (50, 52), (55, 59), (56, 58),
    (60, 64), (61, 63), (65, 67),
];

/// The 66-point markup drops the two inner mouth corners (68-point 60 and
/// 64), so indices from 60 upward shift.
const PAIRS66: [(usize, usize); 28] = [
    (0, 16), (1, 15), (2, 14), (3, 13), (4, 12), (5, 11), (6, 10), (7, 9),
    (17, 26), (18, 25), (19, 24), (20, 23), (21, 22),
    (31, 35), (32, 34),
    (36, 45), (37, 44), (38, 43), (39, 42), (40, 47), (41, 46),
    (48, 54), (49, 53), (50, 52), (55, 59), (56, 58),
    (60, 62), (63, 65),
];

/// Toy rig: 0-3 eye corners (left outer, left inner, right inner, right
/// outer), 4 nose tip, 5-8 mouth (left, top, right, bottom), 9-11 jaw
/// (left, chin, right).
const PAIRS12: [(usize, usize); 4] = [(0, 3), (1, 2), (5, 7), (9, 11)];

pub fn lookup(id: &str) -> Result<Scheme> {
    match id {
        FACE12 => Ok(Scheme {
            id: FACE12,
            n_points: 12,
            flip: from_pairs(12, &PAIRS12),
            left_eye_outer: 0,
            right_eye_outer: 3,
            nose_tip: 4,
        }),
        FACE66 => Ok(Scheme {
            id: FACE66,
            n_points: 66,
            flip: from_pairs(66, &PAIRS66),
            left_eye_outer: 36,
            right_eye_outer: 45,
            nose_tip: 30,
        }),
        FACE68 => Ok(Scheme {
            id: FACE68,
            n_points: 68,
            flip: from_pairs(68, &PAIRS68),
            left_eye_outer: 36,
            right_eye_outer: 45,
            nose_tip: 30,
        }),
        other => Err(Error::UnknownScheme(other.to_string())),
    }
}

/// Index permutation applied to landmark order on a horizontal flip.
pub fn flip_remap(id: &str) -> Result<Vec<usize>> {
    lookup(id).map(|s| s.flip)
}
