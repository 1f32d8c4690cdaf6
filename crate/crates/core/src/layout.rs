//! Node identities and the physical arrangement of a deployment.

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{Bounds, Position};

#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
#[serde(transparent)]
pub struct NodeId(pub u32);

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeRole {
    Anchor,
    Tag,
    Sync,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlacedNode {
    pub id: NodeId,
    #[serde(flatten)]
    pub position: Position,
}

impl PlacedNode {
    pub fn new(id: u32, x: f64, y: f64) -> Self {
        PlacedNode {
            id: NodeId(id),
            position: Position::new(x, y),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LayoutError {
    #[error("node id {0} is used more than once")]
    DuplicateId(NodeId),
    #[error("layout needs at least {needed} anchors, found {found}")]
    TooFewAnchors { needed: usize, found: usize },
    #[error("node {0} has a non-finite coordinate")]
    NonFinite(NodeId),
    #[error("node {id} at ({x}, {y}) lies outside the bounds")]
    OutOfBounds { id: NodeId, x: f64, y: f64 },
    #[error("bounds are empty or non-finite")]
    InvalidBounds,
}

/// Anchors, the sync node and the tag, all in one coordinate frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SystemLayout {
    pub anchors: Vec<PlacedNode>,
    pub sync: PlacedNode,
    #[serde(default = "default_tag_id")]
    pub tag_id: NodeId,
    pub tag_start: Position,
    pub bounds: Bounds,
}

fn default_tag_id() -> NodeId {
    NodeId(100)
}

impl SystemLayout {
    /// The three-anchor room used for the accuracy experiments: anchors at
    /// (5.2, 4.3), (0, 0) and (0, 4.3), sync node at (2, 0), tag at (0, 2),
    /// inside an 8 m x 8 m room.
    pub fn reference_room() -> Self {
        SystemLayout {
            anchors: vec![
                PlacedNode::new(1, 5.2, 4.3),
                PlacedNode::new(2, 0.0, 0.0),
                PlacedNode::new(3, 0.0, 4.3),
            ],
            sync: PlacedNode::new(10, 2.0, 0.0),
            tag_id: default_tag_id(),
            tag_start: Position::new(0.0, 2.0),
            bounds: Bounds::new(Position::new(-1.0, -1.0), Position::new(7.0, 7.0)),
        }
    }

    pub fn anchor_ids(&self) -> Vec<NodeId> {
        self.anchors.iter().map(|a| a.id).collect()
    }

    pub fn anchor_positions(&self) -> Vec<(NodeId, Position)> {
        self.anchors.iter().map(|a| (a.id, a.position)).collect()
    }

    pub fn anchor_position(&self, id: NodeId) -> Option<Position> {
        self.anchors.iter().find(|a| a.id == id).map(|a| a.position)
    }

    pub fn role_of(&self, id: NodeId) -> Option<NodeRole> {
        if id == self.sync.id {
            Some(NodeRole::Sync)
        } else if id == self.tag_id {
            Some(NodeRole::Tag)
        } else if self.anchors.iter().any(|a| a.id == id) {
            Some(NodeRole::Anchor)
        } else {
            None
        }
    }

    /// All node ids in ascending order.
    pub fn node_ids(&self) -> Vec<NodeId> {
        let mut ids: Vec<NodeId> = self.anchors.iter().map(|a| a.id).collect();
        ids.push(self.sync.id);
        ids.push(self.tag_id);
        ids.sort();
        ids
    }

    /// Position of a fixed node. The tag has no fixed position.
    pub fn fixed_position(&self, id: NodeId) -> Option<Position> {
        if id == self.sync.id {
            Some(self.sync.position)
        } else {
            self.anchor_position(id)
        }
    }

    pub fn validate(&self, min_anchors: usize) -> Result<(), LayoutError> {
        if !self.bounds.is_valid() {
            return Err(LayoutError::InvalidBounds);
        }
        let mut seen = BTreeSet::new();
        for id in self
            .anchors
            .iter()
            .map(|a| a.id)
            .chain([self.sync.id, self.tag_id])
        {
            if !seen.insert(id) {
                return Err(LayoutError::DuplicateId(id));
            }
        }
        if self.anchors.len() < min_anchors {
            return Err(LayoutError::TooFewAnchors {
                needed: min_anchors,
                found: self.anchors.len(),
            });
        }
        let placed = self
            .anchors
            .iter()
            .chain(std::iter::once(&self.sync))
            .map(|n| (n.id, n.position))
            .chain(std::iter::once((self.tag_id, self.tag_start)));
        for (id, p) in placed {
            if !p.is_finite() {
                return Err(LayoutError::NonFinite(id));
            }
            if !self.bounds.contains(p) {
                return Err(LayoutError::OutOfBounds { id, x: p.x, y: p.y });
            }
        }
        Ok(())
    }
}
