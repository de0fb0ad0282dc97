use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Output joint order.
pub const COCO17_NAMES: [&str; 17] = [
    "Nose",
    "L.Eye",
    "R.Eye",
    "L.Ear",
    "R.Ear",
    "L.Shoulder",
    "R.Shoulder",
    "L.Elbow",
    "R.Elbow",
    "L.Wrist",
    "R.Wrist",
    "L.Hip",
    "R.Hip",
    "L.Knee",
    "R.Knee",
    "L.Ankle",
    "R.Ankle",
];

// BODY_25: 0 Nose, 1 Neck, 2 RShoulder, 3 RElbow, 4 RWrist, 5 LShoulder,
// 6 LElbow, 7 LWrist, 8 MidHip, 9 RHip, 10 RKnee, 11 RAnkle, 12 LHip,
// 13 LKnee, 14 LAnkle, 15 REye, 16 LEye, 17 REar, 18 LEar, 19-24 feet.
/// BODY_25 source index for each entry of [`COCO17_NAMES`].
pub const BODY25_TO_COCO17: [usize; 17] = [0, 16, 15, 18, 17, 5, 2, 6, 3, 7, 4, 12, 9, 13, 10, 14, 11];

/// Picks the 17 COCO joints out of a `[25 × 3]` OpenPose `(x, y, confidence)`
/// array. Returns `[17 × 2]` coordinates and `[17]` confidences.
pub fn select_coco17<S: Scalar>(openpose25: &Tensor<S>) -> Result<(Tensor<S>, Tensor<S>)> {
    if openpose25.shape() != [25, 3] {
        return Err(Error::shape(format!(
            "expected 25 BODY_25 keypoints of (x, y, c), got {:?}",
            openpose25.shape()
        )));
    }
    let mut coords = Vec::with_capacity(34);
    let mut conf = Vec::with_capacity(17);
    for &src in &BODY25_TO_COCO17 {
        coords.push(openpose25.at(&[src, 0]));
        coords.push(openpose25.at(&[src, 1]));
        conf.push(openpose25.at(&[src, 2]));
    }
    Ok((Tensor::from_vec(&[17, 2], coords)?, Tensor::from_vec(&[17], conf)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_fixture_selects_expected_indices() {
        let t = Tensor::<f64>::from_fn(&[25, 3], |i| if i % 3 == 0 { (i / 3) as f64 } else { 0.5 });
        let (xy, c) = select_coco17(&t).unwrap();
        let xs: Vec<usize> = (0..17).map(|j| xy.at(&[j, 0]) as usize).collect();
        assert_eq!(xs, vec![0, 16, 15, 18, 17, 5, 2, 6, 3, 7, 4, 12, 9, 13, 10, 14, 11]);
        assert!(c.data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn zeros_map_to_zeros() {
        let (xy, c) = select_coco17(&Tensor::<f32>::zeros(&[25, 3])).unwrap();
        assert!(xy.data().iter().chain(c.data()).all(|&v| v == 0.0));
    }

    #[test]
    fn wrong_arity_is_rejected() {
        assert!(select_coco17(&Tensor::<f32>::zeros(&[24, 3])).is_err());
    }
}
