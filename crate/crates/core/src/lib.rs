pub mod autodiff;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod inference;
pub mod math;
pub mod model;
pub mod rng;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tensor::Tensor;

#[cfg(doctest)]
mod book {
    macro_rules! chapter {
        ($name:ident) => {
            #[doc = include_str!(concat!("../../../book/src/", stringify!($name), ".md"))]
            mod $name {}
        };
    }
    chapter!(introduction);
    chapter!(latents);
    chapter!(episodes);
    chapter!(model);
    chapter!(training);
    chapter!(inference);
    chapter!(evaluation);
    chapter!(cli);
}
