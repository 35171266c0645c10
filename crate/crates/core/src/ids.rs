//! String newtypes for the identifiers that cross manager boundaries.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::codec::{Canonical, CodecError, Decoder, Encoder};

macro_rules! string_id {
    ($(#[$m:meta])* $name:ident) => {
        $(#[$m])*
        #[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
        #[serde(transparent)]
        pub struct $name(pub String);

        impl $name {
            pub fn new(s: impl Into<String>) -> Self {
                $name(s.into())
            }

            pub fn as_str(&self) -> &str {
                &self.0
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(&self.0)
            }
        }

        impl From<&str> for $name {
            fn from(s: &str) -> Self {
                $name(s.to_owned())
            }
        }

        impl Canonical for $name {
            fn encode(&self, enc: &mut Encoder) {
                enc.str(&self.0);
            }
            fn decode(dec: &mut Decoder<'_>) -> Result<Self, CodecError> {
                dec.str().map($name)
            }
        }
    };
}

string_id!(
    /// A registered legal person (user or node operator).
    PartyId
);
string_id!(
    /// A state manager or transaction coordinator in the topology.
    ManagerId
);
string_id!(
    /// A resource type: an ISIN for instrument units, a currency code for money.
    ResourceId
);
string_id!(
    /// A 12-character instrument identifier.
    Isin
);
string_id!(TxnId);

impl Isin {
    pub fn resource(&self) -> ResourceId {
        ResourceId(self.0.clone())
    }
}
