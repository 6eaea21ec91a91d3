//! Thresholded Gaussian-kernel adjacency and its diffusion operators.
//!
//!     cargo run --release --example road_graph -- [k]

use hint::netgraph::{adjacency_row_normalize, build_adjacency, default_kernel_sigma, Direction};
use hint::synth::{generate_network, SynthConfig};

fn main() -> hint::error::Result<()> {
    let k = std::env::args().nth(1).map_or(5, |s| s.parse().expect("k"));
    let net = generate_network(&SynthConfig { n_mainline: 6, n_ramp: 3, ..Default::default() })?;
    let sigma = default_kernel_sigma(&net.distances);
    println!("kernel sigma from the finite distances: {:.1} m", sigma.unwrap_or(f64::NAN));

    let a = build_adjacency(&net.distances, k, None)?;
    println!("{} nodes, {} edges, top-{k} per row", a.n, a.edge_count());
    for (i, node) in net.nodes.iter().enumerate() {
        let mut row: Vec<(f64, &str)> = (0..a.n)
            .filter(|&j| a.w[[i, j]] > 0.0)
            .map(|j| (a.w[[i, j]], net.nodes[j].id.as_str()))
            .collect();
        row.sort_by(|x, y| y.0.total_cmp(&x.0));
        let shown: Vec<String> = row.iter().map(|(w, id)| format!("{id}:{w:.3}")).collect();
        println!("  {:>5} -> {}", node.id, shown.join(" "));
    }

    let out = adjacency_row_normalize(&a, Direction::Outgoing);
    let sums: Vec<String> = (0..a.n).map(|i| format!("{:.2}", out.w.row(i).sum())).collect();
    println!("outgoing transition row sums: {}", sums.join(" "));
    Ok(())
}
