//! Backend roles: network server, join server, application server.

mod app;
mod js;
mod ns;

pub use app::{AppServer, AsConfig, AsCounters, AsDelivery, AsEvent, AsOutput, DeliveryPath, Fate, HeldFrame};
pub use js::{JoinServer, JsCounters, JsEvent, JsOutput, JsSession, RegistryEntry, NET_ID};
pub use ns::{strongest, GatewayRx, NetworkServer, NsConfig, NsCounters, NsOutput, NsTimer};
