pub mod cli;
pub mod error;
pub mod gsc;
pub mod inference;
pub mod lasso;
pub mod optim;
pub mod oracle;
pub mod panel;
pub mod qp;
pub mod robustness;
pub mod scm;
pub mod sdid;

pub use error::{Error, Result};
pub use panel::{load_csv, DonorPool, Panel};
