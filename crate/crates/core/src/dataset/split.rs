use serde::{Deserialize, Serialize};

use super::{DatasetError, Recording, Result};

/// One leave-one-subject-out fold.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub test_subject: String,
    pub validation_subject: String,
    pub train_subjects: Vec<String>,
}

/// One plan per subject (sorted order); validation is the next subject in
/// sorted order, wrapping around.
pub fn louo_splits(recordings: &[Recording]) -> Result<Vec<SplitPlan>> {
    let mut subjects: Vec<String> = recordings.iter().map(|r| r.subject_id.clone()).collect();
    subjects.sort();
    subjects.dedup();
    louo_splits_for(&subjects)
}

/// Plans over an explicit subject list (kept in the given order).
pub fn louo_splits_for(subjects: &[String]) -> Result<Vec<SplitPlan>> {
    let n = subjects.len();
    if n < 3 {
        return Err(DatasetError::Contract(format!(
            "leave-one-subject-out needs at least 3 subjects, got {n}"
        )));
    }
    Ok((0..n)
        .map(|i| {
            let val = (i + 1) % n;
            SplitPlan {
                test_subject: subjects[i].clone(),
                validation_subject: subjects[val].clone(),
                train_subjects: (0..n)
                    .filter(|&j| j != i && j != val)
                    .map(|j| subjects[j].clone())
                    .collect(),
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ids(s: &[&str]) -> Vec<String> {
        s.iter().map(|x| x.to_string()).collect()
    }

    #[test]
    fn three_subjects() {
        let plans = louo_splits_for(&ids(&["A", "B", "C"])).unwrap();
        assert_eq!(plans.len(), 3);
        assert_eq!(plans[0].validation_subject, "B");
        assert_eq!(plans[0].train_subjects, ids(&["C"]));
    }

    #[test]
    fn wraparound() {
        let plans = louo_splits_for(&ids(&["A", "B", "C", "D"])).unwrap();
        assert_eq!(plans[3].test_subject, "D");
        assert_eq!(plans[3].validation_subject, "A");
    }

    #[test]
    fn groups_partition_subjects() {
        let all = ids(&["A", "B", "C", "D", "E"]);
        for p in louo_splits_for(&all).unwrap() {
            let mut u = p.train_subjects.clone();
            u.push(p.test_subject.clone());
            u.push(p.validation_subject.clone());
            u.sort();
            assert_eq!(u, all);
        }
    }

    #[test]
    fn too_few_subjects() {
        assert!(louo_splits_for(&ids(&["A", "B"])).is_err());
    }
}
