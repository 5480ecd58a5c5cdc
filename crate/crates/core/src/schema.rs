//! Catalog introspection and the compact schema listing embedded in prompts.
//!
//! Each table becomes one line:
//!
//! ```text
//! Table admissions: row_id (INTEGER, primary key), subject_id (INTEGER, references patients.subject_id), admittime (TIMESTAMP)
//! ```

use std::path::PathBuf;

use rusqlite::Connection;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::execution::ReadOnlyDb;

#[derive(Debug, Error)]
pub enum SchemaError {
    #[error("catalog query failed: {0}")]
    Catalog(#[from] rusqlite::Error),
    #[error("duplicate table name `{0}`")]
    DuplicateTable(String),
    #[error("table `{table}` declares column `{column}` twice")]
    DuplicateColumn { table: String, column: String },
    #[error("table `{0}` has no columns")]
    NoColumns(String),
    #[error("foreign key {table}.{column} references missing {ref_table}.{ref_column}")]
    DanglingForeignKey {
        table: String,
        column: String,
        ref_table: String,
        ref_column: String,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ColumnDef {
    pub name: String,
    pub declared_type: String,
    pub is_primary_key: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ForeignKey {
    pub column: String,
    pub ref_table: String,
    pub ref_column: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TableDef {
    pub name: String,
    pub columns: Vec<ColumnDef>,
    pub foreign_keys: Vec<ForeignKey>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatabaseSchema {
    pub tables: Vec<TableDef>,
    pub source: PathBuf,
}

impl DatabaseSchema {
    pub fn table(&self, name: &str) -> Option<&TableDef> {
        self.tables.iter().find(|t| t.name.eq_ignore_ascii_case(name))
    }

    pub fn validate(&self) -> Result<(), SchemaError> {
        let mut seen = std::collections::HashSet::new();
        for t in &self.tables {
            if !seen.insert(t.name.to_lowercase()) {
                return Err(SchemaError::DuplicateTable(t.name.clone()));
            }
            if t.columns.is_empty() {
                return Err(SchemaError::NoColumns(t.name.clone()));
            }
            let mut cols = std::collections::HashSet::new();
            for c in &t.columns {
                if !cols.insert(c.name.to_lowercase()) {
                    return Err(SchemaError::DuplicateColumn {
                        table: t.name.clone(),
                        column: c.name.clone(),
                    });
                }
            }
        }
        for t in &self.tables {
            for fk in &t.foreign_keys {
                let ok = self.table(&fk.ref_table).is_some_and(|rt| {
                    rt.columns.iter().any(|c| c.name.eq_ignore_ascii_case(&fk.ref_column))
                });
                if !ok {
                    return Err(SchemaError::DanglingForeignKey {
                        table: t.name.clone(),
                        column: fk.column.clone(),
                        ref_table: fk.ref_table.clone(),
                        ref_column: fk.ref_column.clone(),
                    });
                }
            }
        }
        Ok(())
    }
}

pub fn introspect(db: &ReadOnlyDb) -> Result<DatabaseSchema, SchemaError> {
    let tables = introspect_connection(db.connection())?;
    Ok(DatabaseSchema {
        tables,
        source: db.path().to_path_buf(),
    })
}

fn introspect_connection(conn: &Connection) -> Result<Vec<TableDef>, SchemaError> {
    let names: Vec<String> = conn
        .prepare(
            "SELECT name FROM sqlite_master \
             WHERE type = 'table' AND name NOT LIKE 'sqlite\\_%' ESCAPE '\\' \
             ORDER BY rowid",
        )?
        .query_map([], |r| r.get(0))?
        .collect::<Result<_, _>>()?;

    let mut tables = Vec::with_capacity(names.len());
    for name in names {
        let columns: Vec<ColumnDef> = conn
            .prepare("SELECT name, type, pk FROM pragma_table_info(?1) ORDER BY cid")?
            .query_map([&name], |r| {
                Ok(ColumnDef {
                    name: r.get(0)?,
                    declared_type: r.get(1)?,
                    is_primary_key: r.get::<_, i64>(2)? > 0,
                })
            })?
            .collect::<Result<_, _>>()?;
        let mut foreign_keys: Vec<(i64, i64, ForeignKey)> = conn
            .prepare(r#"SELECT id, seq, "from", "table", "to" FROM pragma_foreign_key_list(?1)"#)?
            .query_map([&name], |r| {
                Ok((
                    r.get(0)?,
                    r.get(1)?,
                    ForeignKey {
                        column: r.get(2)?,
                        ref_table: r.get(3)?,
                        ref_column: r.get::<_, Option<String>>(4)?.unwrap_or_default(),
                    },
                ))
            })?
            .collect::<Result<_, _>>()?;
        foreign_keys.sort_by_key(|(id, seq, _)| (*id, *seq));
        let foreign_keys = foreign_keys
            .into_iter()
            .map(|(_, _, mut fk)| {
                // `REFERENCES t` without a column targets the parent's primary key.
                if fk.ref_column.is_empty() {
                    fk.ref_column = primary_key_of(conn, &fk.ref_table).unwrap_or_default();
                }
                fk
            })
            .collect();
        tables.push(TableDef {
            name,
            columns,
            foreign_keys,
        });
    }
    Ok(tables)
}

fn primary_key_of(conn: &Connection, table: &str) -> Option<String> {
    conn.query_row(
        "SELECT name FROM pragma_table_info(?1) WHERE pk = 1",
        [table],
        |r| r.get(0),
    )
    .ok()
}

fn render_column(table: &TableDef, col: &ColumnDef) -> String {
    let mut attrs = Vec::new();
    if !col.declared_type.is_empty() {
        attrs.push(col.declared_type.clone());
    }
    if col.is_primary_key {
        attrs.push("primary key".to_string());
    }
    for fk in table.foreign_keys.iter().filter(|fk| fk.column == col.name) {
        attrs.push(format!("references {}.{}", fk.ref_table, fk.ref_column));
    }
    if attrs.is_empty() {
        col.name.clone()
    } else {
        format!("{} ({})", col.name, attrs.join(", "))
    }
}

pub fn serialize(schema: &DatabaseSchema) -> String {
    schema
        .tables
        .iter()
        .map(|t| {
            let cols: Vec<String> = t.columns.iter().map(|c| render_column(t, c)).collect();
            format!("Table {}: {}", t.name, cols.join(", "))
        })
        .collect::<Vec<_>>()
        .join("\n")
}
