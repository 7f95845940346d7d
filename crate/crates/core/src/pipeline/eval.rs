use serde::{Deserialize, Serialize};

use super::PipelineError;

/// One multiple-choice question evaluated over several circular passes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuestionRecord {
    pub question_id: String,
    /// `(prediction, answer)` per pass.
    pub passes: Vec<(String, String)>,
}

/// Fraction of questions answered correctly in every one of their passes:
/// `Σᵢ Πⱼ [pᵢⱼ = aᵢⱼ] / N`.
pub fn circular_eval_accuracy(records: &[QuestionRecord]) -> Result<f64, PipelineError> {
    if records.is_empty() {
        return Err(PipelineError::EmptyRecords);
    }
    let mut solved = 0usize;
    for r in records {
        if r.passes.is_empty() {
            return Err(PipelineError::EmptyPasses(r.question_id.clone()));
        }
        if r.passes.iter().all(|(p, a)| p == a) {
            solved += 1;
        }
    }
    Ok(solved as f64 / records.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn q(id: &str, passes: &[(&str, &str)]) -> QuestionRecord {
        QuestionRecord {
            question_id: id.into(),
            passes: passes.iter().map(|&(p, a)| (p.into(), a.into())).collect(),
        }
    }

    #[test]
    fn fixtures() {
        assert_eq!(
            circular_eval_accuracy(&[q("a", &[("A", "A"), ("B", "B")])]).unwrap(),
            1.0
        );
        assert_eq!(
            circular_eval_accuracy(&[q("a", &[("A", "A"), ("C", "B")])]).unwrap(),
            0.0
        );
        let mixed = [
            q("1", &[("A", "A"), ("B", "B"), ("C", "C"), ("D", "D")]),
            q("2", &[("B", "B"), ("C", "C")]),
            q("3", &[("A", "A"), ("A", "B"), ("C", "C")]),
            q("4", &[("D", "A")]),
        ];
        assert_eq!(circular_eval_accuracy(&mixed).unwrap(), 0.5);
    }

    #[test]
    fn single_pass_is_plain_accuracy() {
        let recs = [q("1", &[("A", "A")]), q("2", &[("A", "B")]), q("3", &[("C", "C")])];
        assert!((circular_eval_accuracy(&recs).unwrap() - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn errors() {
        assert!(matches!(circular_eval_accuracy(&[]), Err(PipelineError::EmptyRecords)));
        assert!(matches!(
            circular_eval_accuracy(&[q("x", &[])]),
            Err(PipelineError::EmptyPasses(_))
        ));
    }

    #[test]
    fn json_shape() {
        let r: Vec<QuestionRecord> =
            serde_json::from_str(r#"[{"question_id":"q1","passes":[["A","A"],["B","C"]]}]"#).unwrap();
        assert_eq!(r[0].passes[1], ("B".to_string(), "C".to_string()));
    }
}
