use std::collections::{BTreeSet, HashSet};

use super::{SegmentRecord, Split};
use crate::error::{Error, Result};

/// Partitions segments by teacher: every segment of a validation teacher goes
/// to validation, everything else to train. The `split` field of each returned
/// record is rewritten to match.
pub fn split_by_teacher(
    segments: &[SegmentRecord],
    validation_teachers: &BTreeSet<String>,
) -> Result<(Vec<SegmentRecord>, Vec<SegmentRecord>)> {
    let present: HashSet<&str> = segments.iter().map(|s| s.teacher_id.as_str()).collect();
    if let Some(unknown) = validation_teachers.iter().find(|t| !present.contains(t.as_str())) {
        return Err(Error::UnknownTeacher(unknown.clone()));
    }

    let (validation, train): (Vec<_>, Vec<_>) = segments
        .iter()
        .cloned()
        .partition(|s| validation_teachers.contains(&s.teacher_id));
    let assign = |mut v: Vec<SegmentRecord>, split| {
        v.iter_mut().for_each(|s| s.split = split);
        v
    };
    Ok((assign(train, Split::Train), assign(validation, Split::Validation)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn segments(teachers: usize, per_teacher: usize) -> Vec<SegmentRecord> {
        (0..teachers)
            .flat_map(|t| {
                (0..per_teacher).map(move |k| SegmentRecord {
                    segment_id: format!("T{t}_s{k}"),
                    teacher_id: format!("T{t}"),
                    video_id: format!("V{t}"),
                    start: 30.0 * k as f64,
                    duration: 30.0,
                    source_path: format!("V{t}.mp4").into(),
                    split: Split::Train,
                    teacher_box: None,
                    low_quality: false,
                })
            })
            .collect()
    }

    #[test]
    fn forty_six_teachers_nine_validation() {
        let segs = segments(46, 3);
        let val: BTreeSet<String> = (37..46).map(|t| format!("T{t}")).collect();
        let (train, validation) = split_by_teacher(&segs, &val).unwrap();

        let train_teachers: BTreeSet<_> = train.iter().map(|s| s.teacher_id.clone()).collect();
        let val_teachers: BTreeSet<_> = validation.iter().map(|s| s.teacher_id.clone()).collect();
        assert_eq!(train_teachers.len(), 37);
        assert_eq!(val_teachers, val);
        assert!(train_teachers.is_disjoint(&val_teachers));
        assert_eq!(train.len() + validation.len(), segs.len());
        assert!(validation.iter().all(|s| s.split == Split::Validation));
        assert!(train.iter().all(|s| s.split == Split::Train));
    }

    #[test]
    fn empty_validation_keeps_everything_in_train() {
        let segs = segments(4, 2);
        let (train, validation) = split_by_teacher(&segs, &BTreeSet::new()).unwrap();
        assert_eq!(train.len(), 8);
        assert!(validation.is_empty());
    }

    #[test]
    fn all_segments_of_a_validation_teacher_move_together() {
        let segs = segments(3, 3);
        let val = BTreeSet::from(["T1".to_string()]);
        let (train, validation) = split_by_teacher(&segs, &val).unwrap();
        assert_eq!(validation.len(), 3);
        assert!(train.iter().all(|s| s.teacher_id != "T1"));
    }

    #[test]
    fn unknown_teacher_is_an_error() {
        let segs = segments(2, 1);
        let val = BTreeSet::from(["T9".to_string()]);
        assert!(matches!(split_by_teacher(&segs, &val), Err(Error::UnknownTeacher(t)) if t == "T9"));
    }
}
