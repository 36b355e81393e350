//! OpenAPI description of the HTTP surface.

use serde_json::{json, Value};

fn error_response(description: &str) -> Value {
    json!({
        "description": description,
        "content": {"application/json": {"schema": {"$ref": "#/components/schemas/Error"}}}
    })
}

pub fn document() -> Value {
    json!({
        "openapi": "3.0.3",
        "info": {
            "title": "HELIOT decision support API",
            "version": env!("CARGO_PKG_VERSION"),
        },
        "components": {
            "securitySchemes": {"bearer": {"type": "http", "scheme": "bearer"}},
            "schemas": {
                "Error": {
                    "type": "object",
                    "required": ["error"],
                    "properties": {
                        "error": {"type": "string"},
                        "diagnostics": {
                            "type": "array",
                            "items": {
                                "type": "object",
                                "properties": {"line": {"type": "integer"}, "message": {"type": "string"}}
                            }
                        }
                    }
                },
                "AssessmentRequest": {
                    "type": "object",
                    "required": ["drug_code"],
                    "properties": {
                        "drug_code": {"type": "string"},
                        "patient_id": {"type": "string"},
                        "clinical_note": {"type": "string"},
                        "language_hint": {"type": "string", "description": "Language of the note; anything other than English is translated first."}
                    }
                },
                "Assessment": {
                    "type": "object",
                    "properties": {
                        "analysis": {"type": "string"},
                        "classification": {"type": "string"},
                        "reaction": {"type": "string"},
                        "alert": {"type": "string", "enum": ["None", "Interruptive", "Non-interruptive"]},
                        "consistency_flags": {"type": "array", "items": {"type": "string"}},
                        "raw_response": {"type": "string"}
                    }
                },
                "ClinicalNote": {
                    "type": "object",
                    "properties": {
                        "patient_id": {"type": "string"},
                        "timestamp": {"type": "string", "format": "date-time"},
                        "text": {"type": "string"},
                        "source": {"type": "string", "enum": ["manual", "batch", "api"]}
                    }
                },
                "PatientHistory": {
                    "type": "object",
                    "properties": {
                        "patient_id": {"type": "string"},
                        "notes": {"type": "array", "items": {"$ref": "#/components/schemas/ClinicalNote"}}
                    }
                },
                "DrugRecord": {
                    "type": "object",
                    "properties": {
                        "drug_code": {"type": "string"},
                        "drug_name": {"type": "string"},
                        "drug_form": {"type": "string"},
                        "atc_code": {"type": "string"},
                        "composition": {"type": "string"},
                        "excipients": {"type": "string"},
                        "contraindications": {"type": "string"},
                        "drug_interactions": {"type": "string"},
                        "side_effects": {"type": "string"},
                        "incompatibilities": {"type": "string"}
                    }
                },
                "BatchJob": {
                    "type": "object",
                    "properties": {
                        "jobId": {"type": "string"},
                        "state": {"type": "string", "enum": ["queued", "running", "done", "failed"]},
                        "progress": {
                            "type": "object",
                            "properties": {"completed": {"type": "integer"}, "total": {"type": "integer"}}
                        },
                        "resultLocation": {"type": "string", "nullable": true},
                        "error": {"type": "string", "nullable": true},
                        "createdAt": {"type": "string", "format": "date-time"},
                        "summary": {"type": "object", "nullable": true}
                    }
                }
            }
        },
        "security": [{"bearer": []}],
        "paths": {
            "/api/assessments": {"post": {
                "summary": "Assess a prescription; the response is a server-sent event stream",
                "requestBody": {"required": true, "content": {"application/json": {"schema": {"$ref": "#/components/schemas/AssessmentRequest"}}}},
                "responses": {
                    "200": {"description": "Events `chunk` (text), then one `final` (Assessment JSON) or one `error` (message)", "content": {"text/event-stream": {"schema": {"type": "string"}}}},
                    "404": error_response("Unknown drug code"),
                    "422": error_response("Invalid body"),
                    "502": {"description": "Backend failure before any output; the body holds one `error` event", "content": {"text/event-stream": {"schema": {"type": "string"}}}}
                }
            }},
            "/api/patients/{id}/notes": {"post": {
                "summary": "Append a clinical note",
                "parameters": [{"name": "id", "in": "path", "required": true, "schema": {"type": "string"}}],
                "requestBody": {"required": true, "content": {"application/json": {"schema": {
                    "type": "object", "required": ["text"],
                    "properties": {"text": {"type": "string"}, "timestamp": {"type": "string", "format": "date-time"}, "source": {"type": "string"}}
                }}}},
                "responses": {
                    "201": {"description": "Stored note", "content": {"application/json": {"schema": {"$ref": "#/components/schemas/ClinicalNote"}}}},
                    "422": error_response("Invalid note")
                }
            }},
            "/api/patients/{id}/history": {"get": {
                "summary": "Notes of a patient in chronological order",
                "parameters": [{"name": "id", "in": "path", "required": true, "schema": {"type": "string"}}],
                "responses": {"200": {"description": "History", "content": {"application/json": {"schema": {"$ref": "#/components/schemas/PatientHistory"}}}}}
            }},
            "/api/drugs": {"get": {
                "summary": "List drugs, optionally by ATC prefix",
                "parameters": [{"name": "atc_prefix", "in": "query", "required": false, "schema": {"type": "string"}}],
                "responses": {
                    "200": {"description": "Records", "content": {"application/json": {"schema": {"type": "array", "items": {"$ref": "#/components/schemas/DrugRecord"}}}}},
                    "422": error_response("Invalid prefix")
                }
            }},
            "/api/drugs/{code}": {"get": {
                "summary": "One drug record",
                "parameters": [{"name": "code", "in": "path", "required": true, "schema": {"type": "string"}}],
                "responses": {
                    "200": {"description": "Record", "content": {"application/json": {"schema": {"$ref": "#/components/schemas/DrugRecord"}}}},
                    "404": error_response("Unknown drug code")
                }
            }},
            "/api/batches": {"post": {
                "summary": "Upload a dataset CSV for batch assessment",
                "requestBody": {"required": true, "content": {"multipart/form-data": {"schema": {
                    "type": "object", "properties": {"file": {"type": "string", "format": "binary"}}
                }}}},
                "responses": {
                    "202": {"description": "Job accepted", "content": {"application/json": {"schema": {"$ref": "#/components/schemas/BatchJob"}}}},
                    "422": error_response("Malformed CSV, with row diagnostics")
                }
            }},
            "/api/batches/{id}": {"get": {
                "summary": "Job state and progress",
                "parameters": [{"name": "id", "in": "path", "required": true, "schema": {"type": "string"}}],
                "responses": {
                    "200": {"description": "Job", "content": {"application/json": {"schema": {"$ref": "#/components/schemas/BatchJob"}}}},
                    "404": error_response("Unknown job")
                }
            }},
            "/api/batches/{id}/results.csv": {"get": {
                "summary": "Per-case predictions and derived alerts",
                "parameters": [{"name": "id", "in": "path", "required": true, "schema": {"type": "string"}}],
                "responses": {
                    "200": {"description": "CSV", "content": {"text/csv": {"schema": {"type": "string"}}}},
                    "404": error_response("Unknown job"),
                    "409": error_response("Job not finished")
                }
            }},
            "/healthz": {"get": {
                "summary": "Liveness with backend kind and drug count",
                "security": [],
                "responses": {"200": {"description": "Health", "content": {"application/json": {"schema": {
                    "type": "object",
                    "properties": {"status": {"type": "string"}, "backendKind": {"type": "string"}, "drugCount": {"type": "integer"}}
                }}}}}
            }}
        }
    })
}
