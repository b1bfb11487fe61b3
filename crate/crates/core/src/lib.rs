pub mod bench;
pub mod device;
pub mod gguf;
pub mod kernels;
pub mod oracle;
pub mod quant;
pub mod runtime;
pub mod shaderpp;
pub mod tensor;
pub mod verify;
