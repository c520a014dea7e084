//! Real-time reconstruction and geometric defect monitoring for robotic
//! deposition builds observed by laser line profilers.
//!
//! The library covers the full desk-scale pipeline:
//!
//! * [`geom`] — rigid-body transforms and the scanner-to-work-object chain
//! * [`toolpath`] — neutral CSV toolpaths, layer segmentation, time sampling
//! * [`scansim`] — synthetic deposition surface, virtual profilers, streams
//! * [`fusion`] — sparse TSDF grid with adaptive active/inactive weighting
//! * [`meshing`] — marching cubes, mesh distance queries, curvature, PLY I/O
//! * [`reference`] — near-net reference model built from the executed toolpath
//! * [`deviation`] — deviation maps, over/underbuild classification, segmentation
//! * [`tracking`] — defect region association and per-track trend reports

pub mod deviation;
pub mod fusion;
pub mod geom;
pub mod meshing;
pub mod reference;
pub mod scansim;
pub mod toolpath;
pub mod tracking;
