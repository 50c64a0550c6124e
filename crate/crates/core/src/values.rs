//! Variable identifiers and heterogeneous variable assignments.
//!
//! A factor graph mixes pose and landmark variables of different manifold
//! types; [`Value`] is the tagged union over the supported types and
//! [`Values`] is an ordered id -> value map used both for linearization
//! points and for solver estimates. Iteration order is always sorted by id
//! so that downstream output is reproducible.

use std::collections::BTreeMap;
use std::fmt;

use nalgebra::{DVector, Vector2, Vector3, Vector6};

use crate::geometry::{PoseSE2, PoseSE3};

/// Graph variable id: poses are `x<n>`, landmarks `l<n>`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum VarId {
    Pose(u32),
    Landmark(u32),
}

impl fmt::Display for VarId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            VarId::Pose(i) => write!(f, "x{i}"),
            VarId::Landmark(i) => write!(f, "l{i}"),
        }
    }
}

impl VarId {
    /// Parse the `x<n>` / `l<n>` display form.
    pub fn parse(s: &str) -> Option<VarId> {
        let (head, tail) = s.split_at(1);
        let n: u32 = tail.parse().ok()?;
        match head {
            "x" => Some(VarId::Pose(n)),
            "l" => Some(VarId::Landmark(n)),
            _ => None,
        }
    }
}

/// The manifold type of a variable.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ValueKind {
    PoseSE2,
    PoseSE3,
    Point2,
    Point3,
}

impl ValueKind {
    pub fn dim(&self) -> usize {
        match self {
            ValueKind::PoseSE2 => 3,
            ValueKind::PoseSE3 => 6,
            ValueKind::Point2 => 2,
            ValueKind::Point3 => 3,
        }
    }
}

impl fmt::Display for ValueKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            ValueKind::PoseSE2 => "pose_se2",
            ValueKind::PoseSE3 => "pose_se3",
            ValueKind::Point2 => "point2",
            ValueKind::Point3 => "point3",
        };
        f.write_str(s)
    }
}

/// A concrete variable value.
#[derive(Clone, Debug, PartialEq)]
pub enum Value {
    PoseSE2(PoseSE2),
    PoseSE3(PoseSE3),
    Point2(Vector2<f64>),
    Point3(Vector3<f64>),
}

impl Value {
    pub fn kind(&self) -> ValueKind {
        match self {
            Value::PoseSE2(_) => ValueKind::PoseSE2,
            Value::PoseSE3(_) => ValueKind::PoseSE3,
            Value::Point2(_) => ValueKind::Point2,
            Value::Point3(_) => ValueKind::Point3,
        }
    }

    /// Tangent-space dimension.
    pub fn dim(&self) -> usize {
        self.kind().dim()
    }

    /// Move along the tangent vector `delta` (length must equal `self.dim()`).
    pub fn retract(&self, delta: &[f64]) -> Value {
        debug_assert_eq!(delta.len(), self.dim());
        match self {
            Value::PoseSE2(p) => {
                Value::PoseSE2(p.retract(&Vector3::new(delta[0], delta[1], delta[2])))
            }
            Value::PoseSE3(p) => Value::PoseSE3(p.retract(&Vector6::from_row_slice(delta))),
            Value::Point2(p) => Value::Point2(p + Vector2::new(delta[0], delta[1])),
            Value::Point3(p) => Value::Point3(p + Vector3::new(delta[0], delta[1], delta[2])),
        }
    }

    /// Tangent coordinates of `other` relative to `self`; `None` when the
    /// kinds differ.
    pub fn local(&self, other: &Value) -> Option<DVector<f64>> {
        match (self, other) {
            (Value::PoseSE2(a), Value::PoseSE2(b)) => {
                Some(DVector::from_column_slice(a.local(b).as_slice()))
            }
            (Value::PoseSE3(a), Value::PoseSE3(b)) => {
                Some(DVector::from_column_slice(a.local(b).as_slice()))
            }
            (Value::Point2(a), Value::Point2(b)) => {
                Some(DVector::from_column_slice((b - a).as_slice()))
            }
            (Value::Point3(a), Value::Point3(b)) => {
                Some(DVector::from_column_slice((b - a).as_slice()))
            }
            _ => None,
        }
    }

    pub fn as_pose_se2(&self) -> Option<&PoseSE2> {
        match self {
            Value::PoseSE2(p) => Some(p),
            _ => None,
        }
    }

    pub fn as_pose_se3(&self) -> Option<&PoseSE3> {
        match self {
            Value::PoseSE3(p) => Some(p),
            _ => None,
        }
    }

    pub fn as_point2(&self) -> Option<&Vector2<f64>> {
        match self {
            Value::Point2(p) => Some(p),
            _ => None,
        }
    }

    pub fn as_point3(&self) -> Option<&Vector3<f64>> {
        match self {
            Value::Point3(p) => Some(p),
            _ => None,
        }
    }

    /// The point coordinates of a landmark-capable value (Point2/Point3).
    pub fn point_coords(&self) -> Option<DVector<f64>> {
        match self {
            Value::Point2(p) => Some(DVector::from_column_slice(p.as_slice())),
            Value::Point3(p) => Some(DVector::from_column_slice(p.as_slice())),
            _ => None,
        }
    }

    /// Build a point value of the given kind from raw coordinates.
    pub fn point_from_coords(kind: ValueKind, coords: &[f64]) -> Option<Value> {
        match (kind, coords.len()) {
            (ValueKind::Point2, 2) => Some(Value::Point2(Vector2::new(coords[0], coords[1]))),
            (ValueKind::Point3, 3) => {
                Some(Value::Point3(Vector3::new(coords[0], coords[1], coords[2])))
            }
            _ => None,
        }
    }
}

/// Ordered assignment of values to variables.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Values {
    map: BTreeMap<VarId, Value>,
}

impl Values {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, id: VarId, value: Value) -> Option<Value> {
        self.map.insert(id, value)
    }

    pub fn get(&self, id: VarId) -> Option<&Value> {
        self.map.get(&id)
    }

    pub fn get_mut(&mut self, id: VarId) -> Option<&mut Value> {
        self.map.get_mut(&id)
    }

    pub fn remove(&mut self, id: VarId) -> Option<Value> {
        self.map.remove(&id)
    }

    pub fn contains(&self, id: VarId) -> bool {
        self.map.contains_key(&id)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// Iterate in id order.
    pub fn iter(&self) -> impl Iterator<Item = (VarId, &Value)> {
        self.map.iter().map(|(k, v)| (*k, v))
    }
}
