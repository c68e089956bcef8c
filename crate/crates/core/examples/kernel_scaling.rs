//! Median wall time of one attention head as the sequence grows, printed as
//! the bench CSV.
//!
//! `cargo run --release --example kernel_scaling [max_n]`

use temporal_bigen::attention::{bench_scaling, write_bench_csv, Kernel};

fn main() -> temporal_bigen::Result<()> {
    let max_n: usize = std::env::args().nth(1).map_or(4096, |a| a.parse().expect("max_n"));
    let ns: Vec<usize> = std::iter::successors(Some(256), |n| Some(n * 2)).take_while(|&n| n <= max_n).collect();
    let rows = bench_scaling(&ns, &[Kernel::Favor, Kernel::Exact], 64, 32, 5, 0)?;
    write_bench_csv(&rows, std::io::stdout())?;

    for kernel in ["favor", "exact"] {
        let medians: Vec<f64> = rows.iter().filter(|r| r.method == kernel).map(|r| r.median_ms).collect();
        let ratios: Vec<String> = medians.windows(2).map(|w| format!("{:.2}", w[1] / w[0])).collect();
        eprintln!("{kernel}: doubling ratios {}", ratios.join(" "));
    }
    Ok(())
}
