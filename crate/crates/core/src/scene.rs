//! Relational scene-graph tables.
//!
//! The four relations (frames, objects, relationships, attributes) are kept
//! in a per-frame index so that a [`TupleView`] for any object or ordered
//! object pair can be assembled without scanning. Records are validated on
//! insertion; frame contiguity is checked by [`SceneTables::check_complete`].

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::dsl::Arity;

pub type VideoId = u32;
pub type FrameIdx = u32;
pub type ObjectId = u32;

/// Axis-aligned box in pixel coordinates, origin top-left, y downward.
///
/// `x2`/`y2` are exclusive, so a box covering a whole `w x h` frame is
/// `(0, 0, w, h)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct BBox {
    pub x1: i32,
    pub y1: i32,
    pub x2: i32,
    pub y2: i32,
}

impl BBox {
    pub const fn new(x1: i32, y1: i32, x2: i32, y2: i32) -> Self {
        Self { x1, y1, x2, y2 }
    }

    pub fn is_proper(&self) -> bool {
        self.x1 < self.x2 && self.y1 < self.y2
    }

    pub fn within(&self, width: u32, height: u32) -> bool {
        self.x1 >= 0 && self.y1 >= 0 && self.x2 <= width as i32 && self.y2 <= height as i32
    }

    pub fn width(&self) -> i32 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> i32 {
        self.y2 - self.y1
    }

    pub fn centroid(&self) -> (f64, f64) {
        (
            (self.x1 + self.x2) as f64 / 2.0,
            (self.y1 + self.y2) as f64 / 2.0,
        )
    }

    /// Smallest box containing both.
    pub fn union(&self, other: &BBox) -> BBox {
        BBox {
            x1: self.x1.min(other.x1),
            y1: self.y1.min(other.y1),
            x2: self.x2.max(other.x2),
            y2: self.y2.max(other.y2),
        }
    }

    pub fn contains_point(&self, x: i32, y: i32) -> bool {
        x >= self.x1 && x < self.x2 && y >= self.y1 && y < self.y2
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct FrameRecord {
    pub vid: VideoId,
    pub fid: FrameIdx,
    pub image_ref: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ObjectRecord {
    pub vid: VideoId,
    pub fid: FrameIdx,
    pub oid: ObjectId,
    pub oname: String,
    pub x1: i32,
    pub y1: i32,
    pub x2: i32,
    pub y2: i32,
}

impl ObjectRecord {
    pub fn bbox(&self) -> BBox {
        BBox::new(self.x1, self.y1, self.x2, self.y2)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct RelationshipRecord {
    pub vid: VideoId,
    pub fid: FrameIdx,
    pub oid1: ObjectId,
    pub rname: String,
    pub oid2: ObjectId,
}

#[derive(Clone, Debug, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct AttributeRecord {
    pub vid: VideoId,
    pub fid: FrameIdx,
    pub oid: ObjectId,
    pub aname: String,
}

/// Identity of one evaluation unit: an object occurrence, or an ordered pair
/// of distinct objects in the same frame. Ordering is (vid, fid, o0, o1).
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct UnitId {
    pub vid: VideoId,
    pub fid: FrameIdx,
    pub o0: ObjectId,
    pub o1: Option<ObjectId>,
}

impl UnitId {
    pub fn object(vid: VideoId, fid: FrameIdx, oid: ObjectId) -> Self {
        Self { vid, fid, o0: oid, o1: None }
    }

    pub fn pair(vid: VideoId, fid: FrameIdx, subject: ObjectId, target: ObjectId) -> Self {
        Self { vid, fid, o0: subject, o1: Some(target) }
    }

    pub fn arity(&self) -> Arity {
        if self.o1.is_some() {
            Arity::Binary
        } else {
            Arity::Unary
        }
    }
}

impl fmt::Display for UnitId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.o1 {
            Some(o1) => write!(f, "v{}/f{}/o{}-o{}", self.vid, self.fid, self.o0, o1),
            None => write!(f, "v{}/f{}/o{}", self.vid, self.fid, self.o0),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum SceneError {
    DuplicateFrame { vid: VideoId, fid: FrameIdx },
    UnknownFrame { vid: VideoId, fid: FrameIdx },
    DuplicateObject { vid: VideoId, fid: FrameIdx, oid: ObjectId },
    UnknownObject { vid: VideoId, fid: FrameIdx, oid: ObjectId },
    DegenerateBox { vid: VideoId, fid: FrameIdx, oid: ObjectId },
    OutOfBounds { vid: VideoId, fid: FrameIdx, oid: ObjectId },
    SelfRelationship { vid: VideoId, fid: FrameIdx, oid: ObjectId },
    DuplicateRelationship { vid: VideoId, fid: FrameIdx, oid1: ObjectId, rname: String, oid2: ObjectId },
    DuplicateAttribute { vid: VideoId, fid: FrameIdx, oid: ObjectId, aname: String },
    FrameGap { vid: VideoId, expected: FrameIdx, found: FrameIdx },
    EmptyPopulation,
}

impl fmt::Display for SceneError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SceneError::DuplicateFrame { vid, fid } => write!(f, "duplicate frame (vid {vid}, fid {fid})"),
            SceneError::UnknownFrame { vid, fid } => write!(f, "no frame (vid {vid}, fid {fid})"),
            SceneError::DuplicateObject { vid, fid, oid } => {
                write!(f, "duplicate object {oid} in (vid {vid}, fid {fid})")
            }
            SceneError::UnknownObject { vid, fid, oid } => {
                write!(f, "object {oid} not present in (vid {vid}, fid {fid})")
            }
            SceneError::DegenerateBox { vid, fid, oid } => {
                write!(f, "object {oid} in (vid {vid}, fid {fid}) has x1 >= x2 or y1 >= y2")
            }
            SceneError::OutOfBounds { vid, fid, oid } => {
                write!(f, "object {oid} in (vid {vid}, fid {fid}) lies outside the frame")
            }
            SceneError::SelfRelationship { vid, fid, oid } => {
                write!(f, "relationship of object {oid} with itself in (vid {vid}, fid {fid})")
            }
            SceneError::DuplicateRelationship { vid, fid, oid1, rname, oid2 } => {
                write!(f, "duplicate relationship {rname}({oid1}, {oid2}) in (vid {vid}, fid {fid})")
            }
            SceneError::DuplicateAttribute { vid, fid, oid, aname } => {
                write!(f, "duplicate attribute {aname}({oid}) in (vid {vid}, fid {fid})")
            }
            SceneError::FrameGap { vid, expected, found } => {
                write!(f, "video {vid}: frame indices not contiguous (expected {expected}, found {found})")
            }
            SceneError::EmptyPopulation => f.write_str("no eligible units to sample"),
        }
    }
}

impl core::error::Error for SceneError {}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ObjectEntry {
    pub oname: String,
    pub bbox: BBox,
    pub anames: BTreeSet<String>,
}

impl Default for BBox {
    fn default() -> Self {
        BBox::new(0, 0, 1, 1)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct FrameEntry {
    pub image_ref: Option<String>,
    pub objects: BTreeMap<ObjectId, ObjectEntry>,
    /// Keyed by (subject, target).
    pub relationships: BTreeMap<(ObjectId, ObjectId), BTreeSet<String>>,
}

static NO_NAMES: BTreeSet<String> = BTreeSet::new();

/// One object as seen by a UDF.
#[derive(Clone, Copy, Debug)]
pub struct ObjectView<'a> {
    pub oid: ObjectId,
    pub oname: &'a str,
    pub bbox: BBox,
    pub anames: &'a BTreeSet<String>,
}

/// Every column a relationship or attribute UDF may read for one unit.
#[derive(Clone, Copy, Debug)]
pub struct TupleView<'a> {
    pub unit: UnitId,
    pub width: u32,
    pub height: u32,
    pub image_ref: Option<&'a str>,
    pub o0: ObjectView<'a>,
    pub o1: Option<ObjectView<'a>>,
    pub o0_o1_rnames: &'a BTreeSet<String>,
    pub o1_o0_rnames: &'a BTreeSet<String>,
}

impl TupleView<'_> {
    pub fn arity(&self) -> Arity {
        self.unit.arity()
    }
}

/// Distinct values of the three name columns.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ActiveDomains {
    pub onames: BTreeSet<String>,
    pub rnames: BTreeSet<String>,
    pub anames: BTreeSet<String>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct RowCounts {
    pub frames: usize,
    pub objects: usize,
    pub relationships: usize,
    pub attributes: usize,
}

/// The scene-graph store.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SceneTables {
    width: u32,
    height: u32,
    frames: BTreeMap<(VideoId, FrameIdx), FrameEntry>,
    counts: RowCounts,
}

impl SceneTables {
    pub fn new(width: u32, height: u32) -> Self {
        Self { width, height, frames: BTreeMap::new(), counts: RowCounts::default() }
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn counts(&self) -> &RowCounts {
        &self.counts
    }

    pub fn insert_frame(&mut self, rec: FrameRecord) -> Result<(), SceneError> {
        let key = (rec.vid, rec.fid);
        if self.frames.contains_key(&key) {
            return Err(SceneError::DuplicateFrame { vid: rec.vid, fid: rec.fid });
        }
        self.frames.insert(key, FrameEntry { image_ref: rec.image_ref, ..FrameEntry::default() });
        self.counts.frames += 1;
        Ok(())
    }

    pub fn insert_object(&mut self, rec: ObjectRecord) -> Result<(), SceneError> {
        let (vid, fid, oid) = (rec.vid, rec.fid, rec.oid);
        let bbox = rec.bbox();
        if !bbox.is_proper() {
            return Err(SceneError::DegenerateBox { vid, fid, oid });
        }
        if !bbox.within(self.width, self.height) {
            return Err(SceneError::OutOfBounds { vid, fid, oid });
        }
        let frame = self.frames.get_mut(&(vid, fid)).ok_or(SceneError::UnknownFrame { vid, fid })?;
        if frame.objects.contains_key(&oid) {
            return Err(SceneError::DuplicateObject { vid, fid, oid });
        }
        frame.objects.insert(oid, ObjectEntry { oname: rec.oname, bbox, anames: BTreeSet::new() });
        self.counts.objects += 1;
        Ok(())
    }

    pub fn insert_relationship(&mut self, rec: RelationshipRecord) -> Result<(), SceneError> {
        let (vid, fid) = (rec.vid, rec.fid);
        if rec.oid1 == rec.oid2 {
            return Err(SceneError::SelfRelationship { vid, fid, oid: rec.oid1 });
        }
        let frame = self.frames.get_mut(&(vid, fid)).ok_or(SceneError::UnknownFrame { vid, fid })?;
        for oid in [rec.oid1, rec.oid2] {
            if !frame.objects.contains_key(&oid) {
                return Err(SceneError::UnknownObject { vid, fid, oid });
            }
        }
        let names = frame.relationships.entry((rec.oid1, rec.oid2)).or_default();
        if names.contains(&rec.rname) {
            return Err(SceneError::DuplicateRelationship {
                vid,
                fid,
                oid1: rec.oid1,
                rname: rec.rname,
                oid2: rec.oid2,
            });
        }
        names.insert(rec.rname);
        self.counts.relationships += 1;
        Ok(())
    }

    pub fn insert_attribute(&mut self, rec: AttributeRecord) -> Result<(), SceneError> {
        let (vid, fid, oid) = (rec.vid, rec.fid, rec.oid);
        let frame = self.frames.get_mut(&(vid, fid)).ok_or(SceneError::UnknownFrame { vid, fid })?;
        let obj = frame.objects.get_mut(&oid).ok_or(SceneError::UnknownObject { vid, fid, oid })?;
        if obj.anames.contains(&rec.aname) {
            return Err(SceneError::DuplicateAttribute { vid, fid, oid, aname: rec.aname });
        }
        obj.anames.insert(rec.aname);
        self.counts.attributes += 1;
        Ok(())
    }

    /// Checks that every video's frame indices run 0, 1, 2, ... without gaps.
    pub fn check_complete(&self) -> Result<(), SceneError> {
        let mut current: Option<(VideoId, FrameIdx)> = None;
        for &(vid, fid) in self.frames.keys() {
            let expected = match current {
                Some((v, last)) if v == vid => last + 1,
                _ => 0,
            };
            if fid != expected {
                return Err(SceneError::FrameGap { vid, expected, found: fid });
            }
            current = Some((vid, fid));
        }
        Ok(())
    }

    pub fn frame(&self, vid: VideoId, fid: FrameIdx) -> Option<&FrameEntry> {
        self.frames.get(&(vid, fid))
    }

    pub fn frames(&self) -> impl Iterator<Item = (VideoId, FrameIdx, &FrameEntry)> {
        self.frames.iter().map(|(&(v, f), e)| (v, f, e))
    }

    /// Distinct video ids, ascending.
    pub fn videos(&self) -> Vec<VideoId> {
        let mut out: Vec<VideoId> = Vec::new();
        for &(vid, _) in self.frames.keys() {
            if out.last() != Some(&vid) {
                out.push(vid);
            }
        }
        out
    }

    /// Number of frames of `vid` (frames are contiguous from 0).
    pub fn frame_count(&self, vid: VideoId) -> u32 {
        self.frames.range((vid, 0)..=(vid, FrameIdx::MAX)).count() as u32
    }

    /// All object ids that appear anywhere in `vid`, ascending.
    pub fn video_objects(&self, vid: VideoId) -> Vec<ObjectId> {
        let mut set = BTreeSet::new();
        for (_, entry) in self.frames.range((vid, 0)..=(vid, FrameIdx::MAX)) {
            set.extend(entry.objects.keys().copied());
        }
        set.into_iter().collect()
    }

    pub fn active_domains(&self) -> ActiveDomains {
        let mut d = ActiveDomains::default();
        for entry in self.frames.values() {
            for obj in entry.objects.values() {
                if !d.onames.contains(&obj.oname) {
                    d.onames.insert(obj.oname.clone());
                }
                for a in &obj.anames {
                    if !d.anames.contains(a) {
                        d.anames.insert(a.clone());
                    }
                }
            }
            for names in entry.relationships.values() {
                for r in names {
                    if !d.rnames.contains(r) {
                        d.rnames.insert(r.clone());
                    }
                }
            }
        }
        d
    }

    /// Builds the tuple view for `unit`, or `None` when an object is absent.
    pub fn tuple(&self, unit: UnitId) -> Option<TupleView<'_>> {
        let frame = self.frames.get(&(unit.vid, unit.fid))?;
        let view = |oid: ObjectId| {
            frame.objects.get(&oid).map(|o| ObjectView {
                oid,
                oname: o.oname.as_str(),
                bbox: o.bbox,
                anames: &o.anames,
            })
        };
        let o0 = view(unit.o0)?;
        let (o1, fwd, back) = match unit.o1 {
            Some(t) => {
                if t == unit.o0 {
                    return None;
                }
                let o1 = view(t)?;
                let fwd = frame.relationships.get(&(unit.o0, t)).unwrap_or(&NO_NAMES);
                let back = frame.relationships.get(&(t, unit.o0)).unwrap_or(&NO_NAMES);
                (Some(o1), fwd, back)
            }
            None => (None, &NO_NAMES, &NO_NAMES),
        };
        Some(TupleView {
            unit,
            width: self.width,
            height: self.height,
            image_ref: frame.image_ref.as_deref(),
            o0,
            o1,
            o0_o1_rnames: fwd,
            o1_o0_rnames: back,
        })
    }

    /// Every eligible unit of the given arity in canonical order.
    ///
    /// With `class_filter`, only objects whose class is in the set count (for
    /// pairs, both objects must qualify).
    pub fn eligible_units(&self, arity: Arity, class_filter: Option<&BTreeSet<String>>) -> Vec<UnitId> {
        let keep = |o: &ObjectEntry| class_filter.map_or(true, |f| f.contains(&o.oname));
        let mut out = Vec::new();
        for (&(vid, fid), entry) in &self.frames {
            match arity {
                Arity::Unary => {
                    for (&oid, obj) in &entry.objects {
                        if keep(obj) {
                            out.push(UnitId::object(vid, fid, oid));
                        }
                    }
                }
                Arity::Binary => {
                    for (&a, oa) in &entry.objects {
                        if !keep(oa) {
                            continue;
                        }
                        for (&b, ob) in &entry.objects {
                            if a != b && keep(ob) {
                                out.push(UnitId::pair(vid, fid, a, b));
                            }
                        }
                    }
                }
            }
        }
        out
    }

    /// Uniform sample without replacement of up to `n` eligible units.
    ///
    /// Returns fewer than `n` when the population is smaller. The same seed
    /// always yields the same list.
    pub fn sample_units(
        &self,
        arity: Arity,
        n: usize,
        class_filter: Option<&BTreeSet<String>>,
        seed: u64,
    ) -> Result<Vec<UnitId>, SceneError> {
        let population = self.eligible_units(arity, class_filter);
        if population.is_empty() {
            return Err(SceneError::EmptyPopulation);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let k = n.min(population.len());
        Ok(index::sample(&mut rng, population.len(), k)
            .into_iter()
            .map(|i| population[i])
            .collect())
    }

    pub fn frame_records(&self) -> impl Iterator<Item = FrameRecord> + '_ {
        self.frames.iter().map(|(&(vid, fid), e)| FrameRecord { vid, fid, image_ref: e.image_ref.clone() })
    }

    pub fn object_records(&self) -> impl Iterator<Item = ObjectRecord> + '_ {
        self.frames.iter().flat_map(|(&(vid, fid), e)| {
            e.objects.iter().map(move |(&oid, o)| ObjectRecord {
                vid,
                fid,
                oid,
                oname: o.oname.clone(),
                x1: o.bbox.x1,
                y1: o.bbox.y1,
                x2: o.bbox.x2,
                y2: o.bbox.y2,
            })
        })
    }

    /// Relationship rows ordered by (vid, fid, oid1, oid2, rname).
    pub fn relationship_records(&self) -> impl Iterator<Item = RelationshipRecord> + '_ {
        self.frames.iter().flat_map(|(&(vid, fid), e)| {
            e.relationships.iter().flat_map(move |(&(oid1, oid2), names)| {
                names.iter().map(move |r| RelationshipRecord { vid, fid, oid1, rname: r.clone(), oid2 })
            })
        })
    }

    /// Attribute rows ordered by (vid, fid, oid, aname).
    pub fn attribute_records(&self) -> impl Iterator<Item = AttributeRecord> + '_ {
        self.frames.iter().flat_map(|(&(vid, fid), e)| {
            e.objects.iter().flat_map(move |(&oid, o)| {
                o.anames.iter().map(move |a| AttributeRecord { vid, fid, oid, aname: a.clone() })
            })
        })
    }
}
