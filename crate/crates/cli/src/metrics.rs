//! CSV renderings of training metrics.

use shd_core::harness::RunMetrics;

pub const TEACHER_HEADER: &str = "step,task_loss,val_loss";
pub const DISTILL_HEADER: &str = "step,task_loss,shd_loss,aux_loss,total_loss,val_loss";
pub const ALPHAS_HEADER: &str = "step,layer,group,sample,alpha";

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn teacher_csv(m: &RunMetrics) -> String {
    let mut out = format!("{TEACHER_HEADER}\n");
    for r in &m.steps {
        out += &format!("{},{},{}\n", r.step, r.task, opt(r.val));
    }
    out
}

pub fn distill_csv(m: &RunMetrics) -> String {
    let mut out = format!("{DISTILL_HEADER}\n");
    for r in &m.steps {
        out += &format!("{},{},{},{},{},{}\n", r.step, r.task, r.shd, r.aux, r.total, opt(r.val));
    }
    out
}

pub fn alphas_csv(m: &RunMetrics) -> String {
    let mut out = format!("{ALPHAS_HEADER}\n");
    for a in &m.alphas {
        out += &format!("{},{},{},{},{}\n", a.step, a.layer, a.group, a.sample, a.alpha);
    }
    out
}
