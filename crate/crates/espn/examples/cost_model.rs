//! Analytical memory comparison of backprop, forward-mode and ES for the
//! reference few-shot configuration, plus the MAML special case.

use espn::costmodel::{self, CostInputs, BYTES_PER_SCALAR};
use espn::nncore::EmbeddingNet;

fn main() -> espn::Result<()> {
    let channels = 64u64;
    let way = 10u64;
    let population = 64u64;
    let net = EmbeddingNet::new(channels as usize)?;
    // one 10-way 5-shot 15-query episode worth of forward activations
    let g = net.activation_bytes((way * 20) as usize);

    let inputs = CostInputs {
        g,
        l: 1,
        d_phi: net.param_count() as u64,
        d_psi: costmodel::protonet_state_size(channels, way),
        p: population,
        bytes_per_scalar: BYTES_PER_SCALAR,
    };
    let report = costmodel::compute_costs(&inputs)?;
    println!("prototypical network, {channels} channels, {way}-way, P = {population}:");
    print!("{}", report.render_text());

    // MAML adapts all parameters, so the Jacobian explodes to D_phi^2
    let maml = costmodel::compute_costs(&CostInputs {
        d_psi: costmodel::maml_state_size(net.param_count() as u64),
        ..inputs
    })?;
    println!("\nsame backbone under MAML (D_psi = D_phi):");
    print!("{}", maml.render_text());
    Ok(())
}
