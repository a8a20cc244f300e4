//! The per-round training log and its CSV rendering.
//!
//! Schema: `round,stage,client_id,num_samples,loss,lr,accuracy,f1_macro`.
//! Client rows carry loss and learning rate; global evaluation rows carry
//! accuracy and macro F1. Fields that do not apply stay empty. Values render
//! with Rust's shortest round-trip float formatting, so identical runs produce
//! byte-identical files.

/// One logged event: either a client's round summary or a global evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub round: usize,
    pub stage: String,
    pub client_id: Option<usize>,
    pub num_samples: Option<usize>,
    pub loss: Option<f64>,
    pub lr: Option<f64>,
    pub accuracy: Option<f64>,
    pub f1_macro: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricsLog {
    rows: Vec<MetricsRow>,
}

impl MetricsLog {
    pub fn new() -> Self {
        MetricsLog::default()
    }

    /// A client's mean train loss for one round.
    pub fn push_client(
        &mut self,
        round: usize,
        stage: &str,
        client_id: usize,
        num_samples: usize,
        loss: f64,
        lr: f64,
    ) {
        self.rows.push(MetricsRow {
            round,
            stage: stage.to_string(),
            client_id: Some(client_id),
            num_samples: Some(num_samples),
            loss: Some(loss),
            lr: Some(lr),
            accuracy: None,
            f1_macro: None,
        });
    }

    /// Global test metrics after a round.
    pub fn push_eval(
        &mut self,
        round: usize,
        stage: &str,
        num_samples: usize,
        accuracy: f64,
        f1_macro: f64,
    ) {
        self.rows.push(MetricsRow {
            round,
            stage: stage.to_string(),
            client_id: None,
            num_samples: Some(num_samples),
            loss: None,
            lr: None,
            accuracy: Some(accuracy),
            f1_macro: Some(f1_macro),
        });
    }

    pub fn rows(&self) -> &[MetricsRow] {
        &self.rows
    }

    pub fn extend(&mut self, other: MetricsLog) {
        self.rows.extend(other.rows);
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("round,stage,client_id,num_samples,loss,lr,accuracy,f1_macro\n");
        for row in &self.rows {
            let opt_usize = |v: &Option<usize>| v.map(|v| v.to_string()).unwrap_or_default();
            let opt_f64 = |v: &Option<f64>| v.map(|v| v.to_string()).unwrap_or_default();
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{}\n",
                row.round,
                row.stage,
                opt_usize(&row.client_id),
                opt_usize(&row.num_samples),
                opt_f64(&row.loss),
                opt_f64(&row.lr),
                opt_f64(&row.accuracy),
                opt_f64(&row.f1_macro),
            ));
        }
        out
    }
}
