//! Query enhancement, sparse prompt routing over frozen/active subsets,
//! residual prompt injection and the routing regularizers.

mod enhancer;
mod losses;
mod memory;
mod pool;

pub use enhancer::{enhance_query, enhance_query_plain, EnhancerVars, QueryEnhancer};
pub use losses::{diversity_loss, norm_loss};
pub use memory::{nearest_slots, read_memory, write_memory_ema, MemoryBank};
pub use pool::{
    combine_residual, combine_residual_plain, inject, inject_cls, route, route_subset, PoolVars, PromptPool, Routed,
    INITIAL_VALUE_STD, NEW_VALUE_STD,
};

use rand::Rng;

use crate::error::Result;
use crate::numerics::Var;

/// Added to norm denominators in cosine similarities.
pub const COS_EPS: f64 = 1e-12;

/// Freezes the active set of `pool` and appends `count` fresh prompts.
pub fn expand_pool<R: Rng + ?Sized>(pool: &mut PromptPool, count: usize, rng: &mut R) -> Result<()> {
    pool.expand(count, rng)
}

/// Routing result for one layer.
#[derive(Clone, Copy, Debug)]
pub struct LayerRouting<'t> {
    /// `B × |F|` weights, absent before the first expansion.
    pub weights_frozen: Option<Var<'t>>,
    /// `B × |A|` weights (the whole pool before the first expansion).
    pub weights_active: Var<'t>,
    /// `B × d_a` prompt to inject.
    pub p_out: Var<'t>,
}

/// Routes projected queries `z` (`B × d_a`) over the pool.
///
/// Without a frozen partition a single pass over all rows is used and its
/// prompt is injected as is. Otherwise each subset is routed independently
/// and combined as `p_F + λ_r·p_A`.
pub fn route_layer<'t>(z: Var<'t>, pool: &PoolVars<'t>, alpha: f64, lambda_r: f64) -> LayerRouting<'t> {
    let active = route(z, pool.active_keys, pool.active_values, alpha);
    match pool.frozen {
        None => LayerRouting {
            weights_frozen: None,
            weights_active: active.weights,
            p_out: active.prompt,
        },
        Some((fk, fv)) => {
            let frozen = route(z, fk, fv, alpha);
            LayerRouting {
                weights_frozen: Some(frozen.weights),
                weights_active: active.weights,
                p_out: combine_residual(frozen.prompt, active.prompt, lambda_r),
            }
        }
    }
}
