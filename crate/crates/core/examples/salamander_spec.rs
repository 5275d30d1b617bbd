//! Build the crossed female/male mating model from a mating table.
//!
//! Usage: salamander_spec MATINGS.csv SPEC_OUT.json DATA_OUT.csv
//!
//! MATINGS.csv has a header and columns
//! `female,male,female_type,male_type,mated`, with animal ids from 0 and
//! types and outcomes in {0, 1}. The whole experiment is one response
//! record, so DATA_OUT.csv holds a single row.

use std::error::Error;

use mcmle::GlmmDesign;

fn main() -> Result<(), Box<dyn Error>> {
    let args: Vec<String> = std::env::args().collect();
    if args.len() != 4 {
        return Err("usage: salamander_spec MATINGS.csv SPEC_OUT.json DATA_OUT.csv".into());
    }
    let text = std::fs::read_to_string(&args[1])?;
    let mut matings = Vec::new();
    let mut y = Vec::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let cells: Vec<&str> = line.split(',').map(str::trim).collect();
        if cells.len() != 5 {
            return Err(format!("line {}: expected 5 columns, found {}", i + 1, cells.len()).into());
        }
        let num = |c: &str| c.parse::<usize>().map_err(|_| format!("line {}: bad number {c:?}", i + 1));
        let (female, male) = (num(cells[0])?, num(cells[1])?);
        let (ft, mt, mated) = (num(cells[2])?, num(cells[3])?, num(cells[4])?);
        if ft > 1 || mt > 1 || mated > 1 {
            return Err(format!("line {}: types and outcome must be 0 or 1", i + 1).into());
        }
        matings.push((female, male, ft as u8, mt as u8));
        y.push(if mated == 1 { "1" } else { "0" });
    }
    let design = GlmmDesign::crossed_mating(&matings)?.with_name("salamander-crossed");
    eprintln!("T = {}, q = {}, parameters {:?}", design.t(), design.q(), design.layout().names());
    std::fs::write(&args[2], serde_json::to_string(&design)? + "\n")?;
    std::fs::write(&args[3], y.join(",") + "\n")?;
    Ok(())
}
