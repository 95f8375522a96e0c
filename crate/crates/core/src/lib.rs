pub mod bench;
pub mod coupled;
pub mod error;
pub mod mpc;
pub mod plant;
pub mod quadrature;
pub mod rigid_body;
pub mod scenario;
pub mod soft_contact;
pub mod sysid;
pub mod trajopt;

pub use error::{Error, Result};
