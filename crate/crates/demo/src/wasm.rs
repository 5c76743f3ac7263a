//! JavaScript bindings. Arrays cross the boundary as typed arrays.

use wasm_bindgen::prelude::*;

use nipa::nipa::Branch;

fn js_err(e: nipa::error::Error) -> JsError {
    JsError::new(&e.to_string())
}

#[wasm_bindgen]
pub struct BananaSamples(crate::BananaRun);

#[wasm_bindgen]
impl BananaSamples {
    #[wasm_bindgen(getter)]
    pub fn xs(&self) -> Vec<f64> {
        self.0.xs.clone()
    }

    #[wasm_bindgen(getter)]
    pub fn ys(&self) -> Vec<f64> {
        self.0.ys.clone()
    }

    /// 0 = MB, 1 = MF, 2 = EC.
    #[wasm_bindgen(getter)]
    pub fn branches(&self) -> Vec<u8> {
        self.0
            .branches
            .iter()
            .map(|b| match b {
                Branch::Mb => 0,
                Branch::Mf => 1,
                Branch::Ec => 2,
            })
            .collect()
    }

    #[wasm_bindgen(getter)]
    pub fn pool_xs(&self) -> Vec<f64> {
        self.0.pool_xs.clone()
    }

    #[wasm_bindgen(getter)]
    pub fn pool_ys(&self) -> Vec<f64> {
        self.0.pool_ys.clone()
    }

    #[wasm_bindgen(getter)]
    pub fn t1(&self) -> f64 {
        self.0.t1
    }

    #[wasm_bindgen(getter)]
    pub fn t2(&self) -> f64 {
        self.0.t2
    }

    #[wasm_bindgen(getter)]
    pub fn acceptance(&self) -> f64 {
        self.0.acceptance
    }
}

#[wasm_bindgen]
pub fn sample_banana(
    samples: usize,
    curvature: f64,
    sigma_rw_factor: f64,
    seed: u32,
) -> Result<BananaSamples, JsError> {
    crate::sample_banana(samples, curvature, sigma_rw_factor, u64::from(seed))
        .map(BananaSamples)
        .map_err(js_err)
}

/// Flat `[x0, y0, h0, x1, y1, h1, ...]`.
#[wasm_bindgen]
pub fn leapfrog_trajectory(
    curvature: f64,
    qx: f64,
    qy: f64,
    px: f64,
    py: f64,
    step_size: f64,
    steps: usize,
) -> Result<Vec<f64>, JsError> {
    let t = crate::leapfrog_trajectory(curvature, [qx, qy], [px, py], step_size, steps)
        .map_err(js_err)?;
    Ok(t.xs
        .iter()
        .zip(&t.ys)
        .zip(&t.energy)
        .flat_map(|((x, y), h)| [*x, *y, *h])
        .collect())
}

/// Flat `[ess, analytic, acf_0, ..., acf_max_lag, chain...]`.
#[wasm_bindgen]
pub fn ess_ar1(rho: f64, len: usize, seed: u32, max_lag: usize) -> Result<Vec<f64>, JsError> {
    let r = crate::ess_ar1(rho, len, u64::from(seed), max_lag).map_err(js_err)?;
    let mut out = vec![r.ess, r.analytic];
    out.extend(r.acf);
    out.extend(r.chain);
    Ok(out)
}
