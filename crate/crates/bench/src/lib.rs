//! Shared fixtures for the kernel benchmarks.

use psido::evolve::wavepacket;
use psido::symbol::{catalog, SymbolParams};
use psido::{Field, Grid, Symbol};

pub fn grid_1d(points: usize) -> Grid {
    Grid::new(1, 20.0, points).expect("valid grid")
}

pub fn packet(g: &Grid) -> Field {
    wavepacket(g, 4.0, 2.0)
}

pub fn gaussian_kdv() -> Symbol {
    catalog("gaussian_kdv", &SymbolParams { eps: Some(0.05), ..Default::default() }).expect("catalog symbol")
}

pub fn airy() -> Symbol {
    catalog("airy", &SymbolParams::default()).expect("catalog symbol")
}
