use std::time::Instant;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let start = Instant::now();
    let (code, out) = ppforge::cli::run(&args);
    if code == 0 {
        print!("{out}");
    } else {
        eprint!("{out}");
    }
    eprintln!("elapsed: {:.3}s", start.elapsed().as_secs_f64());
    std::process::exit(code);
}
