//! Estimate-and-aggregate versus aggregate-and-estimate on the same device
//! payloads, with the GAMP invocation counts of each.

use fedqcs::bgm::{BgmParams, Component};
use fedqcs::data::synthetic_gradients;
use fedqcs::gamp::GampOptions;
use fedqcs::quantizer::QuantizerSpec;
use fedqcs::reconstruct::{aggregate_and_estimate, estimate_and_aggregate, GroupPlan, ServerContext};
use fedqcs::sensing::{compress_block, measurement_count, SensingMatrix};
use fedqcs::sparsify::{block_sparsify, BlockLayout};

fn nmse_db(target: &[f64], estimate: &[f64]) -> f64 {
    let err: f64 = target.iter().zip(estimate).map(|(a, b)| (a - b).powi(2)).sum();
    let energy: f64 = target.iter().map(|v| v * v).sum();
    10.0 * (err / energy).log10()
}

fn main() -> fedqcs::error::Result<()> {
    let (k, blocks, n) = (8, 4, 1000);
    let theta = BgmParams::new(0.97, vec![Component { weight: 0.03, mean: 0.0, var: 1.0 }])?;
    let grads = synthetic_gradients(&theta, k, blocks, n, 3)?;
    let layout = BlockLayout::contiguous(blocks * n, blocks)?;
    let a = SensingMatrix::new(measurement_count(n, 3.0)?, n, 3)?;
    let spec = QuantizerSpec::lloyd_max(3)?;
    let rho = vec![1.0 / k as f64; k];

    let mut target = vec![0.0; blocks * n];
    let mut payloads = Vec::new();
    for (g, r) in grads.iter().zip(&rho) {
        g.iter().zip(target.iter_mut()).for_each(|(v, t)| *t += r * v);
        let sparse = block_sparsify(g, &layout, n)?;
        payloads.push(sparse.iter().map(|b| compress_block(b, &a, spec)).collect::<Result<Vec<_>, _>>()?);
    }

    let opts = GampOptions::default();
    let ctx = ServerContext { layout: &layout, matrix: &a, spec, opts: &opts, seed: 1, round: 0 };
    let ea = estimate_and_aggregate(&payloads, &rho, &ctx)?;
    println!(
        "estimate-and-aggregate: {:>3} GAMP runs, NMSE {:.2} dB",
        ea.gamp_invocations,
        nmse_db(&target, &ea.estimate)
    );
    for g in [1, 2, 4, 8] {
        let plan = GroupPlan::random(k, g, 1)?;
        let ae = aggregate_and_estimate(&payloads, &rho, &plan, &ctx)?;
        println!(
            "aggregate-and-estimate G={g}: {:>3} GAMP runs, NMSE {:.2} dB",
            ae.gamp_invocations,
            nmse_db(&target, &ae.estimate)
        );
    }
    Ok(())
}
