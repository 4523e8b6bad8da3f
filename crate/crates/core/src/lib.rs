pub mod conllu;
pub mod features;
pub mod lexicon;
pub mod linalg;
pub mod model;
pub mod records;
pub mod spline;
pub mod corpus;
pub mod plan;
pub mod simulate;
pub mod correction;
pub mod render;
