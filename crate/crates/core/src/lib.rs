//! Diesel airpath control toolkit: a gridded LPV prediction model with
//! least-squares identification, a rate-based feedback MPC with DARE terminal
//! penalties and soft state constraints, two interchangeable feedforward
//! schemes, a synthetic nonlinear engine surrogate, and a closed-loop
//! simulation harness with tracking metrics.
//!
//! The controlled states are intake manifold pressure `p_im` (bar) and EGR
//! rate `chi_egr` (fraction); the actuators are EGR valve position (percent
//! open) and VGT position (percent closed). Everything is scheduled on the
//! operating point `rho = (engine speed, fuel injection rate)`.

pub mod config;
pub mod fb_mpc;
pub mod feedforward;
pub mod grid_io;
pub mod lpv;
pub mod mesh;
pub mod plant;
pub mod qp;
pub mod riccati;
pub mod sim;

/// 2-vector over the state or input space.
pub type Vec2 = nalgebra::Vector2<f64>;
/// 2x2 matrix over the state or input space.
pub type Mat2 = nalgebra::Matrix2<f64>;
/// 4-vector over the (delta_x, e) terminal-penalty space.
pub type Vec4 = nalgebra::Vector4<f64>;
/// 4x4 matrix over the (delta_x, e) terminal-penalty space.
pub type Mat4 = nalgebra::Matrix4<f64>;
/// Extended-state vector [delta_x; e; x_prev; u_prev].
pub type Vec8 = nalgebra::SVector<f64, 8>;
/// Extended-state system matrix.
pub type Mat8 = nalgebra::SMatrix<f64, 8, 8>;
