//! Spatial relation between a scene-text box and an object box.

use serde::{Deserialize, Serialize};

use crate::data::BoundingBox;

pub const NUM_RELATIONS: usize = 11;

/// Relation of an object as seen from a scene token. Directions describe where
/// the object's center lies relative to the scene token's center.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[repr(u8)]
pub enum RelationClass {
    Inside = 0,
    Contains = 1,
    Overlap = 2,
    Right = 3,
    LowerRight = 4,
    Below = 5,
    LowerLeft = 6,
    Left = 7,
    UpperLeft = 8,
    Above = 9,
    UpperRight = 10,
}

impl RelationClass {
    pub const ALL: [RelationClass; NUM_RELATIONS] = [
        Self::Inside,
        Self::Contains,
        Self::Overlap,
        Self::Right,
        Self::LowerRight,
        Self::Below,
        Self::LowerLeft,
        Self::Left,
        Self::UpperLeft,
        Self::Above,
        Self::UpperRight,
    ];

    pub fn id(self) -> u8 {
        self as u8
    }

    pub fn from_id(id: u8) -> Option<Self> {
        Self::ALL.get(id as usize).copied()
    }

    /// Directional class for angular sector `k` in 0..8, counting clockwise
    /// (y down) from RIGHT.
    pub fn from_sector(k: usize) -> Self {
        Self::ALL[3 + k % 8]
    }

    /// Sector index 0..8 of a directional class.
    pub fn sector(self) -> Option<usize> {
        (self.id() >= 3).then(|| self.id() as usize - 3)
    }

    /// The class obtained when the two boxes swap roles.
    pub fn opposite(self) -> Self {
        match self {
            Self::Inside => Self::Contains,
            Self::Contains => Self::Inside,
            Self::Overlap => Self::Overlap,
            dir => Self::from_sector(dir.sector().unwrap() + 4),
        }
    }
}

/// Classifies the object box relative to the scene box.
///
/// Precedence is INSIDE > CONTAINS > OVERLAP > direction. Touching boxes have
/// zero intersection area and fall through to a direction.
pub fn compute_rpp_label(scene: &BoundingBox, object: &BoundingBox) -> RelationClass {
    if object.contains(scene) {
        return RelationClass::Inside;
    }
    if scene.contains(object) {
        return RelationClass::Contains;
    }
    if scene.intersection_area(object) > 0.0 {
        return RelationClass::Overlap;
    }
    let (sx, sy) = scene.center();
    let (ox, oy) = object.center();
    let theta = (oy - sy).atan2(ox - sx).to_degrees();
    let k = ((theta + 22.5).rem_euclid(360.0) / 45.0).floor() as usize;
    RelationClass::from_sector(k.min(7))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bb(x1: f64, y1: f64, x2: f64, y2: f64) -> BoundingBox {
        BoundingBox::new(x1, y1, x2, y2).unwrap()
    }

    #[test]
    fn strict_containment_is_inside() {
        let scene = bb(0.4, 0.4, 0.6, 0.6);
        assert_eq!(
            compute_rpp_label(&scene, &bb(0.0, 0.0, 1.0, 1.0)),
            RelationClass::Inside
        );
        assert_eq!(
            compute_rpp_label(&bb(0.0, 0.0, 1.0, 1.0), &scene),
            RelationClass::Contains
        );
    }

    #[test]
    fn identical_boxes_are_inside() {
        let b = bb(0.2, 0.3, 0.5, 0.6);
        assert_eq!(compute_rpp_label(&b, &b), RelationClass::Inside);
    }

    #[test]
    fn horizontal_neighbour_is_right() {
        assert_eq!(
            compute_rpp_label(&bb(0.0, 0.0, 0.2, 0.2), &bb(0.5, 0.0, 0.7, 0.2)),
            RelationClass::Right
        );
    }

    #[test]
    fn partial_overlap() {
        assert_eq!(
            compute_rpp_label(&bb(0.0, 0.0, 0.5, 0.5), &bb(0.25, 0.25, 0.75, 0.75)),
            RelationClass::Overlap
        );
    }

    #[test]
    fn touching_edges_are_directional() {
        assert_eq!(
            compute_rpp_label(&bb(0.0, 0.0, 0.2, 0.2), &bb(0.2, 0.0, 0.4, 0.2)),
            RelationClass::Right
        );
        assert_eq!(
            compute_rpp_label(&bb(0.0, 0.0, 0.2, 0.2), &bb(0.2, 0.2, 0.4, 0.4)),
            RelationClass::LowerRight
        );
    }

    #[test]
    fn y_axis_points_down() {
        let scene = bb(0.4, 0.4, 0.5, 0.5);
        assert_eq!(
            compute_rpp_label(&scene, &bb(0.4, 0.8, 0.5, 0.9)),
            RelationClass::Below
        );
        assert_eq!(
            compute_rpp_label(&scene, &bb(0.4, 0.0, 0.5, 0.1)),
            RelationClass::Above
        );
        assert_eq!(
            compute_rpp_label(&scene, &bb(0.0, 0.0, 0.1, 0.1)),
            RelationClass::UpperLeft
        );
        assert_eq!(
            compute_rpp_label(&scene, &bb(0.8, 0.0, 0.9, 0.1)),
            RelationClass::UpperRight
        );
        assert_eq!(
            compute_rpp_label(&scene, &bb(0.0, 0.8, 0.1, 0.9)),
            RelationClass::LowerLeft
        );
        assert_eq!(
            compute_rpp_label(&scene, &bb(0.0, 0.4, 0.1, 0.5)),
            RelationClass::Left
        );
    }

    #[test]
    fn encoding_is_stable() {
        let ids: Vec<u8> = RelationClass::ALL.iter().map(|r| r.id()).collect();
        assert_eq!(ids, (0..11).collect::<Vec<u8>>());
        for r in RelationClass::ALL {
            assert_eq!(RelationClass::from_id(r.id()), Some(r));
            assert_eq!(r.opposite().opposite(), r);
        }
        assert_eq!(RelationClass::from_id(11), None);
    }
}
