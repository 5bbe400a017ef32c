use super::params::ParamStore;
use super::tape::Tape;
use super::tensor::{AutodiffError, Tensor};

/// Compares analytic gradients of a parameterized scalar function against
/// central finite differences.
///
/// Returns the maximum over all parameter entries of
/// `|analytic - numeric| / max(1, |numeric|)`. A non-finite function value
/// propagates as a non-finite result.
pub fn gradient_check<E, F>(store: &mut ParamStore, eps: f64, mut f: F) -> Result<f64, E>
where
    E: From<AutodiffError>,
    F: FnMut(&mut Tape, &ParamStore) -> Result<Tensor, E>,
{
    // Analytic pass.
    store.zero_gradients();
    let mut tape = Tape::new();
    let loss = f(&mut tape, store)?;
    tape.backward_into(&loss, store).map_err(E::from)?;
    let analytic: Vec<Vec<f64>> = store.iter().map(|p| p.gradient().to_vec()).collect();

    let mut eval = |store: &ParamStore| -> Result<f64, E> {
        let mut tape = Tape::new();
        Ok(f(&mut tape, store)?.scalar_value())
    };

    let mut max_rel = 0.0f64;
    for pi in 0..store.len() {
        let n = store.by_index(pi).tensor().data().len();
        for vi in 0..n {
            let original = store.by_index(pi).tensor().data()[vi];

            let mut values = store.by_index(pi).tensor().data().to_vec();
            values[vi] = original + eps;
            store.by_index_mut(pi).set_values(&values);
            let plus = eval(store)?;

            values[vi] = original - eps;
            store.by_index_mut(pi).set_values(&values);
            let minus = eval(store)?;

            values[vi] = original;
            store.by_index_mut(pi).set_values(&values);

            let numeric = (plus - minus) / (2.0 * eps);
            let rel = (analytic[pi][vi] - numeric).abs() / numeric.abs().max(1.0);
            if !rel.is_finite() {
                return Ok(f64::NAN);
            }
            if rel > max_rel {
                max_rel = rel;
            }
        }
    }
    Ok(max_rel)
}
