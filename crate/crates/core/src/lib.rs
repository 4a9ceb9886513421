//! Emulator of a LoRaWAN network whose gateways can decrypt, aggregate, and
//! forward device data straight to the application server.

pub mod codec;
pub mod control;
pub mod ddf;
pub mod device;
pub mod edge_crypto;
pub mod engine;
pub mod gateway;
pub mod servers;
pub mod sim;
