//! Oriented-box geometry: annotations, the distance/offset/ratio box
//! encoding, horizontal-box IoU from distances, exact rotated IoU and NMS.

mod encoding;
mod nms;
mod obb;
mod polygon;

pub use encoding::{
    decode_obb, decode_obb_lenient, encode_obb, hbb_iou_from_distances, BoxEncoding, HbbIou,
};
pub use nms::{nms, score_order, DetectionRecord};
pub use obb::{normalize_angle, obb_to_hbb, Hbb, ObbAnnotation, Point};
pub use polygon::{clip_convex, convex_intersection_area, polygon_iou, shoelace_area};
