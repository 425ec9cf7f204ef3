use serde::{Deserialize, Serialize};

use crate::data::EmbeddingBatch;
use crate::model::ParamBlock;

/// What travels between hubs and clients in one round.
#[derive(Debug, Clone)]
pub enum Message {
    /// Hub to client: the hub block and the round's sample ids.
    WeightsDown { block: ParamBlock, batch_ids: Vec<usize> },
    /// Client to hub: embeddings of the client's part of the batch.
    EmbeddingsUp(EmbeddingBatch),
    /// Hub to every other hub: the silo's embeddings for the whole batch.
    HubExchange(EmbeddingBatch),
    /// Hub to client: summed other-silo embeddings for the client's samples.
    ProjectedDown(EmbeddingBatch),
    /// Client to hub after the local steps.
    WeightsUp(ParamBlock),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MessageKind {
    WeightsDown,
    EmbeddingsUp,
    HubExchange,
    ProjectedDown,
    WeightsUp,
}

/// Endpoint of a message.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Node {
    Hub { silo: usize },
    Client { silo: usize, client: usize },
}

impl Message {
    pub fn kind(&self) -> MessageKind {
        match self {
            Message::WeightsDown { .. } => MessageKind::WeightsDown,
            Message::EmbeddingsUp(_) => MessageKind::EmbeddingsUp,
            Message::HubExchange(_) => MessageKind::HubExchange,
            Message::ProjectedDown(_) => MessageKind::ProjectedDown,
            Message::WeightsUp(_) => MessageKind::WeightsUp,
        }
    }

    /// Real-valued scalars carried. Sample ids are not counted.
    pub fn scalar_count(&self) -> usize {
        match self {
            Message::WeightsDown { block, .. } | Message::WeightsUp(block) => block.len(),
            Message::EmbeddingsUp(e) | Message::HubExchange(e) | Message::ProjectedDown(e) => e.scalar_count(),
        }
    }
}

/// Log entry kept in the round trace in place of the payload.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MessageRecord {
    pub kind: MessageKind,
    pub from: Node,
    pub to: Node,
    pub scalars: usize,
    /// Local iteration the message belongs to.
    pub iteration: u64,
}
