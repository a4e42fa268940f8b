pub mod corpus;
pub mod localize;
pub mod model;
pub mod seqid;
pub mod tensor;
pub mod theory;
pub mod trainer;
