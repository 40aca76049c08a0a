use super::{Tape, Var};
use crate::error::{Error, Result};
use crate::param::{Bound, ParamStore};

/// Worst-case agreement between tape and finite-difference gradients for one tensor.
#[derive(Clone, Debug)]
pub struct GradCheckEntry {
    pub name: String,
    pub numel: usize,
    pub max_rel_err: f64,
    pub max_abs_err: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub entries: Vec<GradCheckEntry>,
    pub tol: f64,
    pub passed: bool,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.entries.iter().map(|e| e.max_rel_err).fold(0.0, f64::max)
    }

    /// One line per tensor: `name<TAB>numel<TAB>max_rel<TAB>max_abs<TAB>ok|FAIL`.
    pub fn to_table(&self) -> String {
        let mut out = String::from("param\tnumel\tmax_rel_err\tmax_abs_err\tstatus\n");
        for e in &self.entries {
            let status = if e.max_rel_err <= self.tol { "ok" } else { "FAIL" };
            out.push_str(&format!(
                "{}\t{}\t{:.3e}\t{:.3e}\t{}\n",
                e.name, e.numel, e.max_rel_err, e.max_abs_err, status
            ));
        }
        out
    }
}

/// Relative error of an entry is `|a − n| / max(|a|, |n|, floor)` where the
/// floor is `REL_FLOOR` or `TENSOR_FLOOR` times the largest analytic entry of
/// the tensor, whichever is larger. Entries far below the tensor's gradient
/// scale are thus judged against that scale rather than against themselves.
pub const REL_FLOOR: f64 = 1e-6;
pub const TENSOR_FLOOR: f64 = 1e-2;

fn eval<F>(params: &ParamStore<f64>, f: &mut F) -> Result<f64>
where
    F: FnMut(&mut Tape<f64>, &Bound) -> Result<Var>,
{
    let mut tape = Tape::inference();
    let bound = params.bind(&mut tape);
    let loss = f(&mut tape, &bound)?;
    Ok(tape.scalar(loss))
}

/// Compares tape gradients of `f` with central differences of step `h`.
///
/// `f` must build a scalar loss deterministically from the bound parameters;
/// two forward evaluations that disagree are reported as a contract error.
pub fn grad_check<F>(params: &mut ParamStore<f64>, h: f64, tol: f64, mut f: F) -> Result<GradCheckReport>
where
    F: FnMut(&mut Tape<f64>, &Bound) -> Result<Var>,
{
    let first = eval(params, &mut f)?;
    let second = eval(params, &mut f)?;
    if first.to_bits() != second.to_bits() {
        return Err(Error::Contract(format!(
            "objective is not deterministic ({first} vs {second})"
        )));
    }

    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let loss = f(&mut tape, &bound)?;
    tape.backward(loss)?;
    let analytic: Vec<Vec<f64>> = bound
        .vars()
        .iter()
        .map(|&v| tape.grad(v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; tape.value(v).len()]))
        .collect();
    drop(tape);

    let ids: Vec<_> = params.ids().collect();
    let mut entries = Vec::with_capacity(ids.len());
    for (id, grad) in ids.into_iter().zip(analytic) {
        let mut max_rel: f64 = 0.0;
        let mut max_abs: f64 = 0.0;
        let floor = grad.iter().fold(0.0f64, |m, g| m.max(g.abs())) * TENSOR_FLOOR;
        let floor = floor.max(REL_FLOOR);
        for (i, &a) in grad.iter().enumerate() {
            let orig = params.get(id).data()[i];
            params.get_mut(id).data_mut()[i] = orig + h;
            let plus = eval(params, &mut f)?;
            params.get_mut(id).data_mut()[i] = orig - h;
            let minus = eval(params, &mut f)?;
            params.get_mut(id).data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let abs = (a - numeric).abs();
            let rel = abs / a.abs().max(numeric.abs()).max(floor);
            max_abs = max_abs.max(abs);
            max_rel = max_rel.max(rel);
        }
        entries.push(GradCheckEntry {
            name: params.name(id).to_string(),
            numel: grad.len(),
            max_rel_err: max_rel,
            max_abs_err: max_abs,
        });
    }
    let passed = entries.iter().all(|e| e.max_rel_err <= tol);
    Ok(GradCheckReport { entries, tol, passed })
}
